//! Seeded template generator for synthetic car reviews.
//!
//! Each review names a lexicon word (a brand or component) and carries
//! sentiment words drawn from three disjoint polarity pools, padded with
//! neutral filler. Noise injection adds typos, stray punctuation and
//! duplicated characters outside the lexicon word.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Example, Sentiment};
use crate::error::{config_err, Result};
use crate::tokenizer::Lexicon;

pub const DEFAULT_LEXICON: &[&str] = &[
    "比亚迪", "红旗", "奥迪", "宝马", "丰田", "本田", "大众", "吉利", "长安", "哈弗", "森林人",
    "途观", "凯美瑞", "变速箱", "发动机", "方向盘", "后视镜", "涡轮增压",
];

/// Polarity pools indexed by [`Sentiment::index`]; no character is shared between pools.
pub const POLARITY_POOLS: [&[&str]; 3] = [
    &["满意", "舒适", "推荐", "省心", "稳当", "给力", "喜欢", "超值"],
    &["观望", "考虑", "一般", "对比", "咨询", "打听", "再看", "等等"],
    &["差劲", "异响", "漏水", "故障", "抖动", "懊恼", "糟糕", "生锈"],
];

const OPENERS: &[&str] = &["我的", "这台", "朋友的", "新买的", "家里的"];
const ASPECTS: &[&str] = &["油耗", "底盘", "空间", "内饰", "座椅", "加速", "变速箱", "发动机", "方向盘"];
const FILLERS: &[&str] = &["最近", "感觉", "整体", "今天", "上路", "高速", "周末", "城市"];
const CLAUSE_SEP: char = '，';
const END: char = '。';

/// Characters that only ever appear through noise injection.
pub const NOISE_PUNCTUATION: &[char] = &['！', '？', '~', '…', '、', '；'];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub lexicon: Lexicon,
    /// per-character probability of a noise event
    pub noise_rate: f64,
    /// positive / neutral / negative; default from 3670 / 3661 / 2616
    pub priors: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            lexicon: default_lexicon(),
            noise_rate: 0.0,
            priors: default_priors(),
            seed: 0,
        }
    }
}

pub fn default_priors() -> [f64; 3] {
    let total = 9947.0;
    [3670.0 / total, 3661.0 / total, 2616.0 / total]
}

pub fn default_lexicon() -> Lexicon {
    Lexicon::new(DEFAULT_LEXICON).expect("built-in lexicon is valid")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.priors.iter().any(|&p| p < 0.0) || (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err(format!("class priors {:?} must sum to 1", self.priors)));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(config_err(format!("noise_rate {} outside [0, 1)", self.noise_rate)));
        }
        if self.lexicon.is_empty() {
            return Err(config_err("synthetic generation needs a nonempty lexicon"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> SynthManifest {
        SynthManifest {
            seed: self.seed,
            n: self.n,
            priors: self.priors,
            noise_rate: self.noise_rate,
            lexicon_hash: lexicon_hash(&self.lexicon),
        }
    }
}

/// Sidecar describing how a synthetic corpus was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub n: usize,
    pub priors: [f64; 3],
    pub noise_rate: f64,
    pub lexicon_hash: String,
}

/// SHA-256 over the sorted, newline-terminated lexicon words.
pub fn lexicon_hash(lexicon: &Lexicon) -> String {
    hex::encode(Sha256::digest(lexicon.to_text().as_bytes()))
}

/// Every character a noise-free review can contain.
pub fn clean_alphabet(lexicon: &Lexicon) -> BTreeSet<char> {
    let mut set: BTreeSet<char> = [CLAUSE_SEP, END].into_iter().collect();
    let pieces = POLARITY_POOLS
        .iter()
        .flat_map(|p| p.iter())
        .chain(OPENERS)
        .chain(ASPECTS)
        .chain(FILLERS);
    for w in pieces {
        set.extend(w.chars());
    }
    for w in lexicon.words() {
        set.extend(w.chars());
    }
    set
}

fn pick<'a, R: Rng>(pool: &[&'a str], rng: &mut R) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn draw_label<R: Rng>(priors: &[f64; 3], rng: &mut R) -> Sentiment {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (s, p) in Sentiment::ALL.iter().zip(priors) {
        acc += p;
        if u < acc {
            return *s;
        }
    }
    Sentiment::Negative
}

/// Returns the review and the character range of its lexicon word.
fn compose<R: Rng>(label: Sentiment, subjects: &[String], rng: &mut R) -> (String, std::ops::Range<usize>) {
    let mut clauses: Vec<String> = Vec::new();
    let main = rng.gen_range(1..=2);
    for _ in 0..main {
        clauses.push(format!("{}{}", pick(ASPECTS, rng), pick(POLARITY_POOLS[label.index()], rng)));
    }
    if main == 2 && rng.gen_bool(0.3) {
        let other = (label.index() + rng.gen_range(1..3)) % 3;
        clauses.push(format!("{}{}", pick(ASPECTS, rng), pick(POLARITY_POOLS[other], rng)));
    }
    for _ in 0..rng.gen_range(1..=2) {
        clauses.push(format!("{}{}", pick(FILLERS, rng), pick(ASPECTS, rng)));
    }
    clauses.shuffle(rng);

    let opener = pick(OPENERS, rng);
    let subject = &subjects[rng.gen_range(0..subjects.len())];
    let mut text = format!("{opener}{subject}");
    let subject_span = opener.chars().count()..text.chars().count();
    for c in clauses {
        text.push(CLAUSE_SEP);
        text.push_str(&c);
    }
    text.push(END);
    (text, subject_span)
}

fn add_noise<R: Rng>(text: &str, protected: std::ops::Range<usize>, rate: f64, alphabet: &[char], rng: &mut R) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    for (i, c) in text.chars().enumerate() {
        if protected.contains(&i) || rate == 0.0 || !rng.gen_bool(rate) {
            out.push(c);
            continue;
        }
        match rng.gen_range(0..3) {
            0 => out.push(alphabet[rng.gen_range(0..alphabet.len())]),
            1 => {
                out.push(c);
                out.push(NOISE_PUNCTUATION[rng.gen_range(0..NOISE_PUNCTUATION.len())]);
            }
            _ => {
                out.push(c);
                out.push(c);
            }
        }
    }
    out
}

/// Deterministic given `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subjects = cfg.lexicon.words();
    let alphabet: Vec<char> = clean_alphabet(&cfg.lexicon).into_iter().collect();
    let mut out = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let label = draw_label(&cfg.priors, &mut rng);
        let (text, subject) = compose(label, &subjects, &mut rng);
        let text = add_noise(&text, subject, cfg.noise_rate, &alphabet, &mut rng);
        out.push(Example::new(text, label));
    }
    Ok(out)
}

/// Count of polarity-pool words per class, the bag-of-words baseline.
pub fn polarity_counts(text: &str) -> [usize; 3] {
    let mut counts = [0; 3];
    for (k, pool) in POLARITY_POOLS.iter().enumerate() {
        counts[k] = pool.iter().map(|w| text.matches(w).count()).sum();
    }
    counts
}

/// Argmax of [`polarity_counts`]; ties go to the lower class index.
pub fn bag_of_words_predict(text: &str) -> Sentiment {
    let c = polarity_counts(text);
    let best = (0..3).fold(0, |b, k| if c[k] > c[b] { k } else { b });
    Sentiment::ALL[best]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_share_no_characters() {
        for a in 0..3 {
            for b in (a + 1)..3 {
                let ca: BTreeSet<char> = POLARITY_POOLS[a].iter().flat_map(|w| w.chars()).collect();
                let cb: BTreeSet<char> = POLARITY_POOLS[b].iter().flat_map(|w| w.chars()).collect();
                assert!(ca.is_disjoint(&cb), "pools {a} and {b}");
            }
        }
        let noise: BTreeSet<char> = NOISE_PUNCTUATION.iter().copied().collect();
        assert!(clean_alphabet(&default_lexicon()).is_disjoint(&noise));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig {
            n: 50,
            noise_rate: 0.1,
            seed: 4,
            ..SynthConfig::default()
        };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 5, ..cfg.clone() };
        assert_ne!(synth_generate(&cfg).unwrap(), synth_generate(&other).unwrap());
    }

    #[test]
    fn clean_texts_have_no_noise() {
        let cfg = SynthConfig {
            n: 300,
            seed: 1,
            ..SynthConfig::default()
        };
        let alphabet = clean_alphabet(&cfg.lexicon);
        for ex in synth_generate(&cfg).unwrap() {
            assert!(ex.text.chars().all(|c| alphabet.contains(&c)), "{}", ex.text);
        }
    }

    #[test]
    fn noisy_texts_contain_noise() {
        let cfg = SynthConfig {
            n: 200,
            noise_rate: 0.2,
            seed: 1,
            ..SynthConfig::default()
        };
        let noisy = synth_generate(&cfg)
            .unwrap()
            .iter()
            .filter(|e| e.text.chars().any(|c| NOISE_PUNCTUATION.contains(&c)))
            .count();
        assert!(noisy > 100);
    }

    #[test]
    fn every_text_contains_a_lexicon_word() {
        let cfg = SynthConfig {
            n: 500,
            noise_rate: 0.3,
            seed: 2,
            ..SynthConfig::default()
        };
        let words = cfg.lexicon.words();
        for ex in synth_generate(&cfg).unwrap() {
            assert!(words.iter().any(|w| ex.text.contains(w.as_str())), "{}", ex.text);
        }
    }

    #[test]
    fn custom_lexicon_words_are_used() {
        let cfg = SynthConfig {
            n: 20,
            lexicon: Lexicon::new(&["XYZ"]).unwrap(),
            seed: 0,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&cfg).unwrap().iter().all(|e| e.text.contains("XYZ")));
    }

    #[test]
    fn config_validation() {
        let bad = SynthConfig {
            priors: [0.5, 0.5, 0.5],
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            noise_rate: 1.0,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            lexicon: Lexicon::empty(),
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn manifest_hash_is_stable() {
        let m = SynthConfig::default().manifest();
        assert_eq!(m.lexicon_hash.len(), 64);
        assert_eq!(m.lexicon_hash, lexicon_hash(&default_lexicon()));
    }
}
