//! Whole-word masked-language-model corruption.
//!
//! Units (lexicon words or single characters) are selected independently; each
//! selected unit then draws one action that applies to all of its characters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tokenizer::{self, TokenSequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Selection rate and action split. Defaults are 15% selection and an 80/15/5 split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub rate: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            p_mask: 0.80,
            p_random: 0.15,
            p_keep: 0.05,
        }
    }
}

impl MaskConfig {
    /// The 80/10/10 split of the original BERT recipe.
    pub fn canonical_bert() -> Self {
        Self {
            p_random: 0.10,
            p_keep: 0.10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(config_err(format!("mask rate {} outside (0, 1)", self.rate)));
        }
        let ps = [self.p_mask, self.p_random, self.p_keep];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err(format!("mask action probabilities {ps:?} must sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// `(unit index, action)`, one entry per selected unit
    pub units: Vec<(usize, MaskAction)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub ids: Vec<u32>,
    /// original id at every position of a selected unit, `None` elsewhere
    pub labels: Vec<Option<u32>>,
}

impl MaskedExample {
    pub fn labeled_positions(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Bernoulli(`rate`) selection per unit; forces one uniform unit if none was drawn.
pub fn select_units<R: Rng + ?Sized>(seq: &TokenSequence, rate: f64, rng: &mut R) -> Vec<usize> {
    let n = seq.units.len();
    if n == 0 {
        return Vec::new();
    }
    let mut chosen: Vec<usize> = (0..n).filter(|_| rng.gen::<f64>() < rate).collect();
    if chosen.is_empty() {
        chosen.push(rng.gen_range(0..n));
    }
    chosen
}

pub fn draw_action<R: Rng + ?Sized>(cfg: &MaskConfig, rng: &mut R) -> MaskAction {
    let u: f64 = rng.gen();
    if u < cfg.p_mask {
        MaskAction::Mask
    } else if u < cfg.p_mask + cfg.p_random {
        MaskAction::Random
    } else {
        MaskAction::Keep
    }
}

pub fn assign_actions<R: Rng + ?Sized>(selected: &[usize], cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    MaskPlan {
        units: selected.iter().map(|&u| (u, draw_action(cfg, rng))).collect(),
    }
}

pub fn apply<R: Rng + ?Sized>(
    seq: &TokenSequence,
    plan: &MaskPlan,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<MaskedExample> {
    let mut ids = seq.ids.clone();
    let mut labels = vec![None; ids.len()];
    for &(unit, action) in &plan.units {
        let &(start, end) = seq
            .units
            .get(unit)
            .ok_or_else(|| Error::Input(format!("mask plan refers to unit {unit} of {}", seq.units.len())))?;
        for pos in start..end {
            if tokenizer::is_special(seq.ids[pos]) && seq.ids[pos] != tokenizer::UNK {
                return Err(Error::Input(format!("unit {unit} covers special position {pos}")));
            }
            labels[pos] = Some(seq.ids[pos]);
            match action {
                MaskAction::Mask => ids[pos] = tokenizer::MASK,
                MaskAction::Random => {
                    if vocab.content_len() == 0 {
                        return Err(Error::Input(
                            "random replacement needs at least one non-reserved vocabulary token".into(),
                        ));
                    }
                    ids[pos] = rng.gen_range(tokenizer::FIRST_CONTENT_ID..vocab.len() as u32);
                }
                MaskAction::Keep => {}
            }
        }
    }
    Ok(MaskedExample { ids, labels })
}

/// Select, assign and apply in one call. With `whole_word == false` every
/// character is its own unit.
pub fn mask_sequence<R: Rng + ?Sized>(
    seq: &TokenSequence,
    vocab: &Vocab,
    cfg: &MaskConfig,
    whole_word: bool,
    rng: &mut R,
) -> Result<MaskedExample> {
    let ungrouped;
    let seq = if whole_word {
        seq
    } else {
        ungrouped = seq.ungrouped();
        &ungrouped
    };
    let selected = select_units(seq, cfg.rate, rng);
    let plan = assign_actions(&selected, cfg, rng);
    apply(seq, &plan, vocab, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tokenizer::{encode, Lexicon, CLS, MASK, SEP};

    fn setup(text: &str, words: &[&str]) -> (Vocab, TokenSequence) {
        let vocab = Vocab::build(&[text], 1).unwrap();
        let lex = Lexicon::new(words).unwrap();
        let seq = encode(text, &vocab, &lex, 128).unwrap();
        (vocab, seq)
    }

    #[test]
    fn single_unit_always_selected() {
        let (_, seq) = setup("a", &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(select_units(&seq, 0.15, &mut rng), vec![0]);
        }
    }

    #[test]
    fn selection_is_deterministic_under_seed() {
        let (_, seq) = setup("abcdefghijklmnopqrst", &[]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| select_units(&seq, 0.15, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn empty_sequence_selects_nothing() {
        let (_, seq) = setup("", &[]);
        assert!(select_units(&seq, 0.15, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }

    #[test]
    fn masking_single_character_unit() {
        let (vocab, seq) = setup("ABCD", &[]);
        let plan = MaskPlan {
            units: vec![(1, MaskAction::Mask)],
        };
        let ex = apply(&seq, &plan, &vocab, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let [a, b, c, d] = [seq.ids[1], seq.ids[2], seq.ids[3], seq.ids[4]];
        assert_eq!(ex.ids, vec![CLS, a, MASK, c, d, SEP]);
        assert_eq!(ex.labels, vec![None, None, Some(b), None, None, None]);
    }

    #[test]
    fn whole_word_mask_covers_every_character() {
        let (vocab, seq) = setup("我的比亚迪开了", &["比亚迪"]);
        let plan = MaskPlan {
            units: vec![(2, MaskAction::Mask)],
        };
        let ex = apply(&seq, &plan, &vocab, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(&ex.ids[3..6], &[MASK, MASK, MASK]);
        assert_eq!(ex.labeled_positions(), 3);
    }

    #[test]
    fn keep_leaves_ids_but_sets_labels() {
        let (vocab, seq) = setup("我的比亚迪", &["比亚迪"]);
        let plan = MaskPlan {
            units: vec![(2, MaskAction::Keep)],
        };
        let ex = apply(&seq, &plan, &vocab, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ex.ids, seq.ids);
        assert_eq!(ex.labels[3..6], [Some(seq.ids[3]), Some(seq.ids[4]), Some(seq.ids[5])]);
    }

    #[test]
    fn random_never_draws_reserved_ids() {
        let (vocab, seq) = setup("xyab", &["ab"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let plan = MaskPlan {
                units: vec![(2, MaskAction::Random)],
            };
            let ex = apply(&seq, &plan, &vocab, &mut rng).unwrap();
            assert!(ex.ids[3] >= 5 && ex.ids[4] >= 5);
        }
    }

    #[test]
    fn random_needs_content_vocab() {
        let vocab = Vocab::build(&["ab"], 5).unwrap();
        let seq = encode("ab", &vocab, &Lexicon::empty(), 16).unwrap();
        let plan = MaskPlan {
            units: vec![(0, MaskAction::Random)],
        };
        assert!(apply(&seq, &plan, &vocab, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn plan_with_bad_unit_is_rejected() {
        let (vocab, seq) = setup("ab", &[]);
        let plan = MaskPlan {
            units: vec![(7, MaskAction::Mask)],
        };
        assert!(apply(&seq, &plan, &vocab, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn per_character_mode_can_split_a_word() {
        let (vocab, seq) = setup("我的比亚迪", &["比亚迪"]);
        let cfg = MaskConfig {
            rate: 0.3,
            ..MaskConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let split = (0..2000).any(|_| {
            let ex = mask_sequence(&seq, &vocab, &cfg, false, &mut rng).unwrap();
            let labeled = ex.labels[3..6].iter().filter(|l| l.is_some()).count();
            labeled == 1 || labeled == 2
        });
        assert!(split);
    }

    #[test]
    fn config_validation() {
        assert!(MaskConfig::default().validate().is_ok());
        assert!(MaskConfig::canonical_bert().validate().is_ok());
        assert!(MaskConfig { rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(MaskConfig { p_keep: 0.2, ..Default::default() }.validate().is_err());
    }
}
