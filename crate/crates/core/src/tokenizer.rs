//! Character-granularity tokenization with lexicon word grouping.
//!
//! Every character is one token. A [`Lexicon`] of multi-character domain words
//! groups adjacent characters into word units so that masking can treat a
//! whole word as one decision.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config_err, Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
/// First id available to content tokens.
pub const FIRST_CONTENT_ID: u32 = 5;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub fn is_special(id: u32) -> bool {
    id < FIRST_CONTENT_ID
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Assigns ids to characters seen at least `min_freq` times, most frequent
    /// first, ties broken by code point.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<char, usize> = BTreeMap::new();
        for text in corpus {
            for c in text.as_ref().chars() {
                // tab and newlines cannot be stored in the vocab file
                if matches!(c, '\t' | '\n' | '\r') {
                    continue;
                }
                *counts.entry(c).or_default() += 1;
            }
        }
        let mut chars: Vec<(char, usize)> = counts
            .into_iter()
            .filter(|&(_, n)| n >= min_freq.max(1))
            .collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self::from_tokens(chars.into_iter().map(|(c, _)| c.to_string()))
    }

    fn from_tokens(content: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-reserved tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn id(&self, c: char) -> u32 {
        let mut buf = [0u8; 4];
        self.ids.get(&*c.encode_utf8(&mut buf)).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Content text of a sequence; special tokens are dropped, `[UNK]` is rendered literally.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != CLS && i != SEP)
            .filter_map(|&i| self.token(i))
            .collect()
    }

    /// `token<TAB>id` per line, reserved tokens included.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries: Vec<(u32, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Input(format!("vocab line {}: expected token<TAB>id", n + 1)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Input(format!("vocab line {}: bad id {id:?}", n + 1)))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        for (expect, (id, _)) in entries.iter().enumerate() {
            if *id as usize != expect {
                return Err(Error::Input(format!("vocab ids are not contiguous at {expect}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            match entries.get(i) {
                Some((_, t)) if t == r => {}
                _ => return Err(Error::Input(format!("vocab must map {r} to id {i}"))),
            }
        }
        Self::from_tokens(entries.into_iter().skip(RESERVED.len()).map(|(_, t)| t))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

/// A set of multi-character domain words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<Vec<char>>,
    max_chars: usize,
}

impl Lexicon {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut set = HashSet::new();
        let mut max_chars = 0;
        for w in words {
            let chars: Vec<char> = w.as_ref().chars().collect();
            if chars.len() < 2 {
                return Err(Error::Input(format!(
                    "lexicon word {:?} must have at least 2 characters",
                    w.as_ref()
                )));
            }
            max_chars = max_chars.max(chars.len());
            if !set.insert(chars) {
                return Err(Error::Input(format!("duplicate lexicon word {:?}", w.as_ref())));
            }
        }
        Ok(Self {
            words: set,
            max_chars,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// One word per line; `#` lines and blank lines are skipped, trailing whitespace stripped.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self::new(&words)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.chars().collect::<Vec<_>>())
    }

    /// Words in sorted order.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = self.words.iter().map(|w| w.iter().collect()).collect();
        out.sort();
        out
    }

    pub fn to_text(&self) -> String {
        self.words().into_iter().map(|w| w + "\n").collect()
    }

    /// Greedy left-to-right longest match. Returns half-open character spans that
    /// partition `0..chars.len()`.
    pub fn segment_chars(&self, chars: &[char]) -> Vec<(usize, usize)> {
        let mut units = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let longest = self.max_chars.min(chars.len() - i);
            let len = (2..=longest)
                .rev()
                .find(|&l| self.words.contains(&chars[i..i + l]))
                .unwrap_or(1);
            units.push((i, i + len));
            i += len;
        }
        units
    }
}

/// Splits `text` into word units: lexicon matches become one unit, every other
/// character is its own unit. Spans are character offsets.
pub fn segment(text: &str, lexicon: &Lexicon) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    lexicon.segment_chars(&chars)
}

/// `[CLS] content [SEP]` token ids with word-unit spans over the content positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Half-open spans in sequence positions; content starts at position 1.
    pub units: Vec<(usize, usize)>,
}

impl TokenSequence {
    /// Number of content positions.
    pub fn content_len(&self) -> usize {
        self.ids.len().saturating_sub(2)
    }

    /// The same ids with every content position as its own unit.
    pub fn ungrouped(&self) -> Self {
        Self {
            ids: self.ids.clone(),
            units: (1..=self.content_len()).map(|p| (p, p + 1)).collect(),
        }
    }
}

pub fn encode(text: &str, vocab: &Vocab, lexicon: &Lexicon, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(config_err(format!("max_len must be at least 2, got {max_len}")));
    }
    let chars: Vec<char> = text.chars().take(max_len - 2).collect();
    let mut ids = Vec::with_capacity(chars.len() + 2);
    ids.push(CLS);
    ids.extend(chars.iter().map(|&c| vocab.id(c)));
    ids.push(SEP);
    let units = lexicon
        .segment_chars(&chars)
        .into_iter()
        .map(|(s, e)| (s + 1, e + 1))
        .collect();
    Ok(TokenSequence { ids, units })
}
