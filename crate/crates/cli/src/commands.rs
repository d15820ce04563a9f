use std::path::{Path, PathBuf};

use atwwm_core::adversarial::AdvConfig;
use atwwm_core::data::{load_jsonl, save_jsonl, synth::lexicon_hash, Example, SynthManifest};
use atwwm_core::masking::mask_sequence;
use atwwm_core::model::{load_checkpoint, save_checkpoint, Model, PRETRAINED_PREFIXES};
use atwwm_core::tokenizer::{encode, Lexicon, Vocab, MASK};
use atwwm_core::train::{read_loss_csv, write_loss_csv, LossRow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cli::{Command, Common};
use crate::config::RunConfig;
use crate::error::{require_file, CliError, CliResult};
use crate::experiment::{self, Arm};

/// Loads `--config` (or defaults), applies flag overrides, then validates.
pub fn resolve(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            require_file(p, "config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = common.epsilon {
        cfg.adv.epsilon = e;
    }
    if let Some(l) = common.lambda {
        cfg.adv.lambda = l;
    }
    if let Some(lex) = &common.lexicon {
        cfg.lexicon = Some(lex.clone());
    }
    if let Some(arm) = common.arm {
        cfg = arm.configure(&cfg);
        cfg.arm = Some(arm);
    }
    if common.no_adv {
        cfg.adv.enabled = false;
    }
    if common.no_wwm {
        cfg.whole_word = false;
    }
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// `--run-dir` if given, else a fresh `<out>/<UTC timestamp>-seed<seed>`.
pub fn create_run_dir(common: &Common, seed: u64) -> CliResult<PathBuf> {
    let dir = match &common.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            let base = common.out.join(format!("{stamp}-seed{seed}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(atwwm_core::Error::from)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(atwwm_core::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(atwwm_core::Error::from)?;
    Ok(())
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    let p = path.as_deref().ok_or_else(|| CliError::usage(format!("--{flag} is required")))?;
    require_file(p, flag)?;
    Ok(p)
}

fn load_examples(path: &Option<PathBuf>, flag: &str) -> CliResult<Vec<Example>> {
    let p = required(path, flag)?;
    let data = load_jsonl(p)?;
    if data.is_empty() {
        return Err(CliError::Core(atwwm_core::Error::Input(format!("{} has no examples", p.display()))));
    }
    Ok(data)
}

/// A checkpoint with the vocabulary and lexicon stored beside it.
struct Saved {
    model: Model,
    vocab: Vocab,
    lexicon: Option<Lexicon>,
}

fn load_saved(path: &Path) -> CliResult<Saved> {
    require_file(path, "checkpoint")?;
    let vocab_path = path.with_file_name("vocab.tsv");
    require_file(&vocab_path, "vocabulary")?;
    let lex_path = path.with_file_name("lexicon.txt");
    let lexicon = if lex_path.is_file() { Some(Lexicon::load(&lex_path)?) } else { None };
    Ok(Saved {
        model: load_checkpoint(path)?,
        vocab: Vocab::load(&vocab_path)?,
        lexicon,
    })
}

fn save_all(dir: &Path, model: &Model, vocab: &Vocab, lexicon: &Lexicon, rows: &[LossRow], cfg: &RunConfig) -> CliResult<()> {
    save_checkpoint(model, &dir.join("checkpoint.atwm"))?;
    vocab.save(&dir.join("vocab.tsv"))?;
    std::fs::write(dir.join("lexicon.txt"), lexicon.to_text()).map_err(atwwm_core::Error::from)?;
    write_loss_csv(&dir.join("loss.csv"), rows)?;
    cfg.save(&dir.join("config.json"))
}

/// Runs one subcommand and returns the text for stdout.
pub fn run(command: &Command) -> CliResult<String> {
    match command {
        Command::SynthData { n, noise_rate, common } => synth_data(common, *n, *noise_rate),
        Command::Pretrain { data, epochs, common } => pretrain(common, data, *epochs),
        Command::Finetune { data, val, init, epochs, common } => finetune(common, data, val, init, *epochs),
        Command::Evaluate { checkpoint, data, common } => evaluate(common, checkpoint, data, false),
        Command::AttackEval { checkpoint, data, common } => evaluate(common, checkpoint, data, true),
        Command::GridSearch { data, val, init, grid, common } => grid_search(common, data, val, init, grid),
        Command::Ablation { seeds, common } => ablation(common, *seeds),
        Command::MaskDemo { text, common } => mask_demo(common, text),
        Command::LossCurves { runs, common } => loss_curves(common, runs),
    }
}

fn synth_data(common: &Common, n: Option<usize>, noise_rate: Option<f64>) -> CliResult<String> {
    let cfg = resolve(common, |c| {
        if let Some(n) = n {
            c.synth.n = n;
        }
        if let Some(r) = noise_rate {
            c.synth.noise_rate = r;
        }
    })?;
    let lexicon = experiment::load_lexicon(&cfg)?;
    let corpus = experiment::synth_corpus(&cfg, &lexicon, cfg.seed)?;
    let splits = experiment::split(&cfg, &corpus, cfg.seed)?;
    let dir = create_run_dir(common, cfg.seed)?;
    save_jsonl(&dir.join("corpus.jsonl"), &corpus)?;
    save_jsonl(&dir.join("train.jsonl"), &splits.train)?;
    save_jsonl(&dir.join("val.jsonl"), &splits.val)?;
    save_jsonl(&dir.join("test.jsonl"), &splits.test)?;
    let manifest = SynthManifest {
        seed: cfg.seed,
        n: cfg.synth.n,
        priors: atwwm_core::data::synth::default_priors(),
        noise_rate: cfg.synth.noise_rate,
        lexicon_hash: lexicon_hash(&lexicon),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    std::fs::write(dir.join("lexicon.txt"), lexicon.to_text()).map_err(atwwm_core::Error::from)?;
    cfg.save(&dir.join("config.json"))?;
    Ok(format!(
        "wrote {} examples ({} train / {} val / {} test) to {}",
        corpus.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        dir.display()
    ))
}

fn pretrain(common: &Common, data: &Option<PathBuf>, epochs: Option<usize>) -> CliResult<String> {
    let cfg = resolve(common, |c| {
        if let Some(p) = data {
            c.paths.data = Some(p.clone());
        }
        if let Some(e) = epochs {
            c.pretrain.epochs = e;
        }
    })?;
    let train = load_examples(&cfg.paths.data, "data")?;
    let lexicon = experiment::load_lexicon(&cfg)?;
    let vocab = experiment::build_vocab(&cfg, &train)?;
    let variant = if cfg.whole_word { "pretrain_wwm" } else { "pretrain_char" };
    let (model, rows) = experiment::pretrain(&cfg, &vocab, &lexicon, &train, cfg.whole_word, cfg.seed, variant)?;
    let dir = create_run_dir(common, cfg.seed)?;
    save_all(&dir, &model, &vocab, &lexicon, &rows, &cfg)?;
    Ok(format!(
        "pretrained {} steps, final loss {:.4}; outputs in {}",
        rows.len(),
        rows.last().map_or(f64::NAN, |r| r.loss_total),
        dir.display()
    ))
}

fn finetune(common: &Common, data: &Option<PathBuf>, val: &Option<PathBuf>, init: &Option<PathBuf>, epochs: Option<usize>) -> CliResult<String> {
    let cfg = resolve(common, |c| {
        if let Some(p) = data {
            c.paths.data = Some(p.clone());
        }
        if let Some(p) = val {
            c.paths.val = Some(p.clone());
        }
        if let Some(p) = init {
            c.paths.checkpoint = Some(p.clone());
        }
        if let Some(e) = epochs {
            c.finetune.epochs = e;
        }
    })?;
    let train = load_examples(&cfg.paths.data, "data")?;
    let saved = cfg.paths.checkpoint.as_deref().map(load_saved).transpose()?;
    let lexicon = experiment::load_lexicon(&cfg)?;
    let vocab = match &saved {
        Some(s) => s.vocab.clone(),
        None => experiment::build_vocab(&cfg, &train)?,
    };
    let model_cfg = experiment::model_config(&cfg, &vocab);
    if let Some(s) = &saved {
        let fresh = Model::new(model_cfg.clone(), 0)?;
        let expected = fresh.params.names().filter(|n| PRETRAINED_PREFIXES.iter().any(|p| n.starts_with(p))).count();
        let mut probe = fresh;
        if probe.params.copy_matching(&s.model.params, &PRETRAINED_PREFIXES) != expected {
            return Err(CliError::usage("the --init checkpoint's encoder does not match the configured model"));
        }
    }
    let variant = cfg.arm.map_or("finetune", Arm::name);
    let (model, rows) = experiment::finetune(
        &cfg,
        model_cfg,
        saved.as_ref().map(|s| &s.model),
        &vocab,
        &lexicon,
        &train,
        cfg.adv.clone(),
        cfg.seed,
        variant,
    )?;
    let dir = create_run_dir(common, cfg.seed)?;
    save_all(&dir, &model, &vocab, &lexicon, &rows, &cfg)?;
    let mut msg = format!("fine-tuned {} steps; outputs in {}", rows.len(), dir.display());
    if cfg.paths.val.is_some() {
        let val = load_examples(&cfg.paths.val, "val")?;
        let report = experiment::evaluate_model(&model, &vocab, &lexicon, &val, cfg.eval_batch_size)?;
        write_json(&dir.join("val_metrics.json"), &report)?;
        msg.push_str(&format!("\nvalidation accuracy {:.4}, macro-F1 {:.4}", report.accuracy, report.macro_f1));
    }
    Ok(msg)
}

#[derive(Serialize)]
struct AttackReport {
    epsilon: f64,
    sites: Vec<atwwm_core::adversarial::Site>,
    clean: atwwm_core::metrics::MetricsReport,
    attacked: atwwm_core::metrics::MetricsReport,
}

fn evaluate(common: &Common, checkpoint: &Option<PathBuf>, data: &Option<PathBuf>, attack: bool) -> CliResult<String> {
    let cfg = resolve(common, |c| {
        if let Some(p) = checkpoint {
            c.paths.checkpoint = Some(p.clone());
        }
        if let Some(p) = data {
            c.paths.data = Some(p.clone());
        }
    })?;
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint")?;
    let saved = load_saved(ckpt)?;
    let examples = load_examples(&cfg.paths.data, "data")?;
    let lexicon = match saved.lexicon {
        Some(l) => l,
        None => experiment::load_lexicon(&cfg)?,
    };
    let clean = experiment::evaluate_model(&saved.model, &saved.vocab, &lexicon, &examples, cfg.eval_batch_size)?;
    let dir = create_run_dir(common, cfg.seed)?;
    cfg.save(&dir.join("config.json"))?;
    let (file, json) = if attack {
        let adv = AdvConfig {
            enabled: true,
            ..cfg.adv.clone()
        };
        let attacked = experiment::attack_evaluate(&saved.model, &saved.vocab, &lexicon, &examples, &adv, cfg.eval_batch_size)?;
        let report = AttackReport {
            epsilon: adv.epsilon,
            sites: adv.sites.clone(),
            clean,
            attacked,
        };
        ("attack.json", serde_json::to_string_pretty(&report).map_err(atwwm_core::Error::from)?)
    } else {
        ("metrics.json", serde_json::to_string_pretty(&clean).map_err(atwwm_core::Error::from)?)
    };
    std::fs::write(dir.join(file), format!("{json}\n")).map_err(atwwm_core::Error::from)?;
    Ok(json)
}

#[derive(Serialize)]
struct GridReport {
    best_epsilon: f64,
    table: Vec<atwwm_core::adversarial::GridRow>,
}

fn grid_search(common: &Common, data: &Option<PathBuf>, val: &Option<PathBuf>, init: &Option<PathBuf>, grid: &Option<Vec<f64>>) -> CliResult<String> {
    let cfg = resolve(common, |c| {
        if let Some(p) = data {
            c.paths.data = Some(p.clone());
        }
        if let Some(p) = val {
            c.paths.val = Some(p.clone());
        }
        if let Some(p) = init {
            c.paths.checkpoint = Some(p.clone());
        }
        if let Some(g) = grid {
            c.epsilon_grid = g.clone();
        }
    })?;
    let lexicon = experiment::load_lexicon(&cfg)?;
    let (train, val) = if cfg.paths.data.is_some() {
        (load_examples(&cfg.paths.data, "data")?, load_examples(&cfg.paths.val, "val")?)
    } else {
        let corpus = experiment::synth_corpus(&cfg, &lexicon, cfg.seed)?;
        let s = experiment::split(&cfg, &corpus, cfg.seed)?;
        (s.train, s.val)
    };
    let saved = cfg.paths.checkpoint.as_deref().map(load_saved).transpose()?;
    let vocab = match &saved {
        Some(s) => s.vocab.clone(),
        None => experiment::build_vocab(&cfg, &train)?,
    };
    let (best, table) = experiment::grid_search(&cfg, saved.as_ref().map(|s| &s.model), &vocab, &lexicon, &train, &val)?;
    let dir = create_run_dir(common, cfg.seed)?;
    cfg.save(&dir.join("config.json"))?;
    let mut out = String::from("| epsilon | val accuracy | status |\n|---|---|---|\n");
    for r in &table {
        let score = r.score.map_or("-".to_string(), |s| format!("{s:.4}"));
        out.push_str(&format!("| {} | {} | {} |\n", r.epsilon, score, r.status));
    }
    out.push_str(&format!("best epsilon: {best}"));
    write_json(&dir.join("grid.json"), &GridReport { best_epsilon: best, table })?;
    Ok(out)
}

fn ablation(common: &Common, seeds: Option<usize>) -> CliResult<String> {
    let cfg = resolve(common, |c| {
        if let Some(n) = seeds {
            c.ablation_seeds = n;
        }
    })?;
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|k| cfg.seed + k).collect();
    let arms: Vec<Arm> = match common.arm {
        Some(a) => vec![a],
        None => Arm::ALL.to_vec(),
    };
    let dir = create_run_dir(common, cfg.seed)?;
    cfg.save(&dir.join("config.json"))?;
    let report = experiment::run_ablation(&cfg, &seeds, &arms, Some(&dir))?;
    write_json(&dir.join("ablation.json"), &report)?;
    let md = report.to_markdown();
    std::fs::write(dir.join("ablation.md"), &md).map_err(atwwm_core::Error::from)?;
    Ok(md)
}

fn render(ids: &[u32], vocab: &Vocab) -> String {
    ids[1..ids.len() - 1]
        .iter()
        .map(|&id| if id == MASK { "[MASK]".to_string() } else { vocab.token(id).unwrap_or("[UNK]").to_string() })
        .collect()
}

/// Three-row table: the text, per-character masking, whole-word masking.
pub fn mask_demo_table(text: &str, lexicon: &Lexicon, cfg: &RunConfig) -> CliResult<String> {
    if text.trim().is_empty() {
        return Err(CliError::usage("--text is empty"));
    }
    let vocab = Vocab::build(&[text], 1)?;
    let seq = encode(text, &vocab, lexicon, text.chars().count() + 2)?;
    let mut rows = vec![("original", text.to_string())];
    for (label, whole_word) in [("per-character masking", false), ("whole-word masking", true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let masked = mask_sequence(&seq, &vocab, &cfg.mask, whole_word, &mut rng)?;
        rows.push((label, render(&masked.ids, &vocab)));
    }
    let mut out = String::from("| Approach | Result |\n|---|---|\n");
    for (label, result) in rows {
        out.push_str(&format!("| {label} | {result} |\n"));
    }
    Ok(out)
}

fn mask_demo(common: &Common, text: &str) -> CliResult<String> {
    let cfg = resolve(common, |_| {})?;
    let lexicon = experiment::load_lexicon(&cfg)?;
    mask_demo_table(text, &lexicon, &cfg)
}

/// Loss CSVs of a run directory (`loss.csv` and `*.loss.csv`, sorted), or the file itself.
fn loss_files(run: &Path) -> CliResult<Vec<PathBuf>> {
    if run.is_file() {
        return Ok(vec![run.to_path_buf()]);
    }
    if !run.is_dir() {
        return Err(CliError::usage(format!("run {} does not exist", run.display())));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(run)
        .map_err(atwwm_core::Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n == "loss.csv" || n.ends_with(".loss.csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Core(atwwm_core::Error::Input(format!("run {} has no loss CSV", run.display()))));
    }
    Ok(files)
}

/// Concatenates the loss logs of `runs` in argument order.
pub fn merge_loss_curves(runs: &[PathBuf]) -> CliResult<Vec<LossRow>> {
    let mut rows = Vec::new();
    for run in runs {
        for file in loss_files(run)? {
            let part = read_loss_csv(&file).map_err(|e| CliError::Core(atwwm_core::Error::Input(format!("run {}: {e}", run.display()))))?;
            rows.extend(part);
        }
    }
    Ok(rows)
}

fn loss_curves(common: &Common, runs: &[PathBuf]) -> CliResult<String> {
    let cfg = resolve(common, |_| {})?;
    let rows = merge_loss_curves(runs)?;
    let dir = create_run_dir(common, cfg.seed)?;
    let path = dir.join("loss_curves.csv");
    write_loss_csv(&path, &rows)?;
    Ok(format!("merged {} rows from {} runs into {}", rows.len(), runs.len(), path.display()))
}
