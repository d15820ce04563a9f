//! Pipeline stages shared by the subcommands, and the five-arm ablation.

use std::fmt::Write as _;
use std::path::Path;

use atwwm_core::adversarial::{grid_search_epsilon, AdvConfig, GridRow, Site, Trainer};
use atwwm_core::data::{stratified_split, synth_generate, Example, Splits, SynthConfig};
use atwwm_core::metrics::{evaluate, MetricsReport};
use atwwm_core::model::{HeadKind, Model, ModelConfig, PRETRAINED_PREFIXES};
use atwwm_core::tokenizer::{Lexicon, Vocab};
use atwwm_core::train::{attack_predict, encode_examples, fit_classifier, predict, pretrain_mlm, write_loss_csv, LossRow};
use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use crate::config::RunConfig;
use crate::error::CliResult;

pub fn load_lexicon(cfg: &RunConfig) -> CliResult<Lexicon> {
    match &cfg.lexicon {
        Some(path) => {
            crate::error::require_file(path, "lexicon")?;
            Ok(Lexicon::load(path)?)
        }
        None => Ok(atwwm_core::data::synth::default_lexicon()),
    }
}

pub fn synth_corpus(cfg: &RunConfig, lexicon: &Lexicon, seed: u64) -> CliResult<Vec<Example>> {
    let synth = SynthConfig {
        n: cfg.synth.n,
        lexicon: lexicon.clone(),
        noise_rate: cfg.synth.noise_rate,
        seed,
        ..SynthConfig::default()
    };
    Ok(synth_generate(&synth)?)
}

pub fn split(cfg: &RunConfig, corpus: &[Example], seed: u64) -> CliResult<Splits> {
    Ok(stratified_split(corpus, &cfg.split, seed)?)
}

pub fn build_vocab(cfg: &RunConfig, train: &[Example]) -> CliResult<Vocab> {
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    Ok(Vocab::build(&texts, cfg.min_char_freq)?)
}

/// The configured model with the vocabulary size filled in.
pub fn model_config(cfg: &RunConfig, vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        ..cfg.model.clone()
    }
}

/// MLM pretraining from a fresh initialization.
pub fn pretrain(cfg: &RunConfig, vocab: &Vocab, lexicon: &Lexicon, train: &[Example], whole_word: bool, seed: u64, variant: &str) -> CliResult<(Model, Vec<LossRow>)> {
    let model = Model::new(model_config(cfg, vocab), seed)?;
    let adv = if cfg.pretrain_adv {
        AdvConfig {
            sites: vec![Site::Embedding],
            ..cfg.adv.clone()
        }
    } else {
        AdvConfig::disabled()
    };
    let (seqs, _) = encode_examples(train, vocab, lexicon, model.config.max_len)?;
    let mut trainer = Trainer::new(model, cfg.pretrain.adam, adv, seed)?;
    let tc = atwwm_core::train::TrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    let rows = pretrain_mlm(&mut trainer, &seqs, vocab, &cfg.mask, whole_word, &tc, variant)?;
    Ok((trainer.model, rows))
}

/// Fine-tuning, optionally starting from pretrained encoder weights.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &RunConfig,
    model_cfg: ModelConfig,
    init: Option<&Model>,
    vocab: &Vocab,
    lexicon: &Lexicon,
    train: &[Example],
    adv: AdvConfig,
    seed: u64,
    variant: &str,
) -> CliResult<(Model, Vec<LossRow>)> {
    let mut model = Model::new(model_cfg, seed)?;
    if let Some(init) = init {
        model.params.copy_matching(&init.params, &PRETRAINED_PREFIXES);
    }
    let (seqs, golds) = encode_examples(train, vocab, lexicon, model.config.max_len)?;
    let mut trainer = Trainer::new(model, cfg.finetune.adam, adv, seed)?;
    let tc = atwwm_core::train::TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let rows = fit_classifier(&mut trainer, &seqs, &golds, &tc, variant, |_, _| Ok(false))?;
    Ok((trainer.model, rows))
}

pub fn evaluate_model(model: &Model, vocab: &Vocab, lexicon: &Lexicon, data: &[Example], batch_size: usize) -> CliResult<MetricsReport> {
    let (seqs, golds) = encode_examples(data, vocab, lexicon, model.config.max_len)?;
    let preds = predict(model, &seqs, batch_size)?;
    Ok(evaluate(&preds, &golds, model.config.num_classes)?)
}

/// Metrics under an FGM attack at `attack.epsilon` built from gold labels.
pub fn attack_evaluate(model: &Model, vocab: &Vocab, lexicon: &Lexicon, data: &[Example], attack: &AdvConfig, batch_size: usize) -> CliResult<MetricsReport> {
    let (seqs, golds) = encode_examples(data, vocab, lexicon, model.config.max_len)?;
    let preds = attack_predict(model, &seqs, &golds, attack, batch_size)?;
    Ok(evaluate(&preds, &golds, model.config.num_classes)?)
}

/// Adversarial settings for fine-tuning at `epsilon`; zero means clean training.
pub fn adv_at(base: &AdvConfig, epsilon: f64) -> AdvConfig {
    AdvConfig {
        enabled: base.enabled && epsilon > 0.0,
        epsilon: if epsilon > 0.0 { epsilon } else { base.epsilon },
        ..base.clone()
    }
}

/// One fine-tuning run per candidate epsilon, scored by validation accuracy.
pub fn grid_search(
    cfg: &RunConfig,
    init: Option<&Model>,
    vocab: &Vocab,
    lexicon: &Lexicon,
    train: &[Example],
    val: &[Example],
) -> CliResult<(f64, Vec<GridRow>)> {
    let model_cfg = model_config(cfg, vocab);
    let base = AdvConfig {
        enabled: true,
        ..cfg.adv.clone()
    };
    let result = grid_search_epsilon(&cfg.epsilon_grid, |eps| {
        let variant = format!("eps_{eps}");
        let (model, _) = finetune(cfg, model_cfg.clone(), init, vocab, lexicon, train, adv_at(&base, eps), cfg.seed, &variant)?;
        Ok(evaluate_model(&model, vocab, lexicon, val, cfg.eval_batch_size)?.accuracy)
    });
    Ok(result?)
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Arm {
    Bert,
    BertWwm,
    BertAdv,
    BertWwmAdv,
    AtwwmBert,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Bert, Arm::BertWwm, Arm::BertAdv, Arm::BertWwmAdv, Arm::AtwwmBert];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Bert => "bert",
            Arm::BertWwm => "bert_wwm",
            Arm::BertAdv => "bert_adv",
            Arm::BertWwmAdv => "bert_wwm_adv",
            Arm::AtwwmBert => "atwwm_bert",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Bert => "BERT",
            Arm::BertWwm => "BERT-wwm",
            Arm::BertAdv => "BERT+ADV",
            Arm::BertWwmAdv => "BERT-wwm+ADV",
            Arm::AtwwmBert => "ATWWM-BERT",
        }
    }

    pub fn whole_word(self) -> bool {
        matches!(self, Arm::BertWwm | Arm::BertWwmAdv | Arm::AtwwmBert)
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Arm::BertAdv | Arm::BertWwmAdv | Arm::AtwwmBert)
    }

    pub fn head(self) -> HeadKind {
        match self {
            Arm::AtwwmBert => HeadKind::Lstm,
            _ => HeadKind::MeanPool,
        }
    }

    /// Applies the arm's toggles to a run configuration.
    pub fn configure(self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        out.whole_word = self.whole_word();
        out.adv.enabled = self.adversarial();
        out.model.head = self.head();
        out
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub attacked_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub macro_f1_mean: f64,
    pub macro_f1_std: f64,
    pub attacked_accuracy_mean: f64,
    pub attacked_accuracy_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub attack_epsilon: f64,
    pub summaries: Vec<ArmSummary>,
    pub runs: Vec<ArmRun>,
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = values.mean();
    let std = if values.len() < 2 { 0.0 } else { values.std_dev() };
    (mean, std)
}

impl AblationReport {
    pub fn run(&self, arm: Arm, seed: u64) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    /// Seeds where `a` has attacked accuracy at least that of `b`.
    pub fn robust_wins(&self, a: Arm, b: Arm) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| match (self.run(a, s), self.run(b, s)) {
                (Some(x), Some(y)) => x.attacked_accuracy >= y.attacked_accuracy,
                _ => false,
            })
            .count()
    }

    /// Markdown tables: ACC and Macro-F1 per arm, then attacked accuracy.
    pub fn to_markdown(&self) -> String {
        let pct = |m: f64, s: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
        let mut out = String::new();
        let _ = writeln!(out, "Seeds: {}", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "));
        let _ = writeln!(out);
        let _ = writeln!(out, "| Model | ACC (%) | Macro-F1 (%) |");
        let _ = writeln!(out, "|---|---|---|");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "| {} | {} | {} |",
                s.arm.label(),
                pct(s.accuracy_mean, s.accuracy_std),
                pct(s.macro_f1_mean, s.macro_f1_std)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "| Model | ACC under FGM, ε = {} (%) |", self.attack_epsilon);
        let _ = writeln!(out, "|---|---|");
        for s in &self.summaries {
            let _ = writeln!(out, "| {} | {} |", s.arm.label(), pct(s.attacked_accuracy_mean, s.attacked_accuracy_std));
        }
        out
    }
}

/// Runs every arm for every seed. Per seed the corpus, split, vocabulary and
/// the two pretrained encoders (per-character and whole-word MLM) are shared
/// by the arms. Loss logs go under `out/seed<s>/` when `out` is given.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64], arms: &[Arm], out: Option<&Path>) -> CliResult<AblationReport> {
    cfg.validate()?;
    let lexicon = load_lexicon(cfg)?;
    let attack = AdvConfig {
        enabled: true,
        ..cfg.adv.clone()
    };
    let mut runs = Vec::new();
    for &seed in seeds {
        let corpus = synth_corpus(cfg, &lexicon, seed)?;
        let splits = split(cfg, &corpus, seed)?;
        let vocab = build_vocab(cfg, &splits.train)?;
        let seed_dir = match out {
            Some(dir) => {
                let d = dir.join(format!("seed{seed}"));
                std::fs::create_dir_all(&d).map_err(atwwm_core::Error::from)?;
                Some(d)
            }
            None => None,
        };
        let mut pretrained: [Option<Model>; 2] = [None, None];
        for &arm in arms {
            let arm_cfg = arm.configure(cfg);
            let slot = usize::from(arm.whole_word());
            if pretrained[slot].is_none() {
                let variant = if arm.whole_word() { "pretrain_wwm" } else { "pretrain_char" };
                log::info!("seed {seed}: {variant}");
                let (model, rows) = pretrain(&arm_cfg, &vocab, &lexicon, &splits.train, arm.whole_word(), seed, variant)?;
                if let Some(d) = &seed_dir {
                    write_loss_csv(&d.join(format!("{variant}.loss.csv")), &rows)?;
                }
                pretrained[slot] = Some(model);
            }
            log::info!("seed {seed}: fine-tuning {arm}");
            let (model, rows) = finetune(
                &arm_cfg,
                model_config(&arm_cfg, &vocab),
                pretrained[slot].as_ref(),
                &vocab,
                &lexicon,
                &splits.train,
                arm_cfg.adv.clone(),
                seed,
                arm.name(),
            )?;
            if let Some(d) = &seed_dir {
                write_loss_csv(&d.join(format!("{}.loss.csv", arm.name())), &rows)?;
            }
            let report = evaluate_model(&model, &vocab, &lexicon, &splits.test, cfg.eval_batch_size)?;
            let attacked = attack_evaluate(&model, &vocab, &lexicon, &splits.test, &attack, cfg.eval_batch_size)?;
            runs.push(ArmRun {
                arm,
                seed,
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
                attacked_accuracy: attacked.accuracy,
                final_loss: rows.last().map_or(f64::NAN, |r| r.loss_total),
            });
        }
    }
    let summaries = arms
        .iter()
        .map(|&arm| {
            let pick = |f: fn(&ArmRun) -> f64| runs.iter().filter(|r| r.arm == arm).map(f).collect::<Vec<f64>>();
            let (accuracy_mean, accuracy_std) = mean_std(&pick(|r| r.accuracy));
            let (macro_f1_mean, macro_f1_std) = mean_std(&pick(|r| r.macro_f1));
            let (attacked_accuracy_mean, attacked_accuracy_std) = mean_std(&pick(|r| r.attacked_accuracy));
            ArmSummary {
                arm,
                accuracy_mean,
                accuracy_std,
                macro_f1_mean,
                macro_f1_std,
                attacked_accuracy_mean,
                attacked_accuracy_std,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        attack_epsilon: attack.epsilon,
        summaries,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_toggles() {
        assert!(!Arm::Bert.whole_word() && !Arm::Bert.adversarial());
        assert!(Arm::BertWwmAdv.whole_word() && Arm::BertWwmAdv.adversarial());
        assert_eq!(Arm::AtwwmBert.head(), HeadKind::Lstm);
        assert_eq!(Arm::BertAdv.head(), HeadKind::MeanPool);
        let cfg = Arm::BertWwm.configure(&RunConfig::default());
        assert!(cfg.whole_word && !cfg.adv.enabled);
        let names: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
        assert_eq!(names, ["bert", "bert_wwm", "bert_adv", "bert_wwm_adv", "atwwm_bert"]);
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn zero_epsilon_means_clean_training() {
        let base = AdvConfig::default();
        assert!(!adv_at(&base, 0.0).enabled);
        assert!(adv_at(&base, 0.0).validate().is_ok());
        let a = adv_at(&base, 0.3);
        assert!(a.enabled && a.epsilon == 0.3);
    }

    #[test]
    fn tiny_ablation_report_shape() {
        let mut cfg = RunConfig::default();
        cfg.synth.n = 60;
        cfg.model = ModelConfig::with_hidden(0, 8);
        cfg.model.layers = 1;
        cfg.model.max_len = 32;
        cfg.pretrain.epochs = 1;
        cfg.finetune.epochs = 1;
        let report = run_ablation(&cfg, &[1, 2], &Arm::ALL, None).unwrap();
        assert_eq!(report.runs.len(), 10);
        assert_eq!(report.summaries.len(), 5);
        let md = report.to_markdown();
        assert!(md.contains("| ATWWM-BERT |") && md.contains("±"));
        assert!(report.robust_wins(Arm::BertWwmAdv, Arm::BertWwmAdv) == 2);
    }
}
