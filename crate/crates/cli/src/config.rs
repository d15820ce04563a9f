use std::path::{Path, PathBuf};

use atwwm_core::adversarial::AdvConfig;
use atwwm_core::data::SplitSpec;
use atwwm_core::masking::MaskConfig;
use atwwm_core::model::ModelConfig;
use atwwm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::experiment::Arm;

/// Synthetic corpus settings used by `synth-data`, `grid-search` and `ablation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub n: usize,
    pub noise_rate: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { n: 2000, noise_rate: 0.1 }
    }
}

/// Input files. Relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Training data for `pretrain`/`finetune`/`grid-search`, evaluation data for `evaluate`/`attack-eval`.
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Initial weights for `finetune`, the model for `evaluate`/`attack-eval`.
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run needs. Written next to every run's outputs as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// `vocab_size` 0 means "size of the vocabulary built from the data".
    pub model: ModelConfig,
    pub adv: AdvConfig,
    /// Adversarial training during MLM pretraining.
    pub pretrain_adv: bool,
    pub whole_word: bool,
    pub mask: MaskConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub split: SplitSpec,
    pub synth: SynthSettings,
    pub epsilon_grid: Vec<f64>,
    pub eval_batch_size: usize,
    pub min_char_freq: usize,
    pub lexicon: Option<PathBuf>,
    pub paths: Paths,
    pub ablation_seeds: usize,
    /// Arm whose toggles were applied; informational once resolved.
    pub arm: Option<Arm>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::new(0),
            adv: AdvConfig::default(),
            pretrain_adv: false,
            whole_word: true,
            mask: MaskConfig::default(),
            pretrain: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            split: SplitSpec::default(),
            synth: SynthSettings::default(),
            epsilon_grid: vec![0.05, 0.1, 0.17, 0.3, 0.5],
            eval_batch_size: 64,
            min_char_freq: 1,
            lexicon: None,
            paths: Paths::default(),
            ablation_seeds: 5,
            arm: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(atwwm_core::Error::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(atwwm_core::Error::from)?;
        Ok(())
    }

    /// Checks every section; a `vocab_size` of 0 is allowed here.
    pub fn validate(&self) -> CliResult<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.adv.validate()?;
        self.mask.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.split.validate()?;
        if self.ablation_seeds == 0 {
            return Err(CliError::usage("ablation_seeds must be positive"));
        }
        if self.eval_batch_size == 0 {
            return Err(CliError::usage("eval_batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.synth.noise_rate) {
            return Err(CliError::usage(format!("noise_rate {} outside [0, 1)", self.synth.noise_rate)));
        }
        if self.epsilon_grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(CliError::usage("epsilon grid values must be finite and >= 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.json");
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.adv.epsilon = 0.3;
        cfg.save(&p).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "adv": {"epsilon": 0.5}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.adv.epsilon, 0.5);
        assert_eq!(cfg.adv.lambda, 1.0);
        assert_eq!(cfg.finetune.batch_size, 16);
    }

    #[test]
    fn conflicting_adv_settings_rejected() {
        let mut cfg = RunConfig::default();
        cfg.adv.epsilon = 0.0;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        cfg.adv.enabled = false;
        assert!(cfg.validate().is_ok());
    }
}
