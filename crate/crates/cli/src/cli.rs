use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::experiment::Arm;

#[derive(Debug, Parser)]
#[command(name = "atwwm", version, about = "Whole-word-mask pretraining and adversarial fine-tuning for review sentiment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand. Each one overrides the matching field of `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// FGM perturbation size
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Weight of the adversarial loss
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Disable adversarial training
    #[arg(long, global = true)]
    pub no_adv: bool,
    /// Per-character masking instead of whole-word masking
    #[arg(long, global = true)]
    pub no_wwm: bool,
    /// Apply one ablation arm's toggles (or restrict `ablation` to it)
    #[arg(long, global = true, value_enum)]
    pub arm: Option<Arm>,
    /// Base output directory; each run writes to <out>/<timestamp>-seed<seed>
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Write directly into this directory instead of a timestamped one
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Word list for whole-word masking, one word per line
    #[arg(long, global = true)]
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled corpus and its train/val/test split
    SynthData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        noise_rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Masked-language-model pretraining on the texts of a JSONL file
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune the classifier, optionally from a pretrained checkpoint
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Pretrained checkpoint; its vocab.tsv is reused
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of a checkpoint on a JSONL file
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of a checkpoint under an FGM attack
    AttackEval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune once per epsilon and pick the best by validation accuracy
    GridSearch {
        /// Training JSONL; a synthetic corpus is generated when absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated candidates
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the five-arm ablation over several seeds
    Ablation {
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Show per-character and whole-word masking of one text
    MaskDemo {
        #[arg(long)]
        text: String,
        #[command(flatten)]
        common: Common,
    },
    /// Merge the loss logs of several runs into one CSV
    LossCurves {
        /// Run directories or loss CSV files
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::SynthData { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Evaluate { common, .. }
            | Command::AttackEval { common, .. }
            | Command::GridSearch { common, .. }
            | Command::Ablation { common, .. }
            | Command::MaskDemo { common, .. }
            | Command::LossCurves { common, .. } => common,
        }
    }
}
