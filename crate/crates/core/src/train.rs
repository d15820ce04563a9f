//! Epoch loops for MLM pretraining and classifier fine-tuning, batched
//! prediction, and the per-step loss log.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{attacked_predictions, AdvConfig, StepLosses, Task, Trainer};
use crate::data::Example;
use crate::error::{config_err, Error, Result};
use crate::masking::{mask_sequence, MaskConfig};
use crate::model::{Batch, Model};
use crate::optim::AdamConfig;
use crate::tokenizer::{encode, Lexicon, TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 3,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        self.adam.validate()
    }
}

/// One optimizer step in the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_clean: f64,
    pub loss_adv: f64,
    pub loss_total: f64,
    pub variant: String,
}

impl LossRow {
    fn new(epoch: usize, step: u64, l: StepLosses, variant: &str) -> Self {
        Self {
            epoch,
            step,
            loss_clean: l.loss_clean,
            loss_adv: l.loss_adv,
            loss_total: l.loss_total,
            variant: variant.to_string(),
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,loss_clean,loss_adv,loss_total,variant";

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(LOSS_CSV_HEADER.split(',')).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.join(",") != LOSS_CSV_HEADER {
        return Err(Error::Input(format!(
            "{}: expected header {LOSS_CSV_HEADER}, found {}",
            path.display(),
            header.join(",")
        )));
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<LossRow>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Input(format!("csv: {other:?}")),
    }
}

/// Encodes every example; returns sequences and gold class indices.
pub fn encode_examples(examples: &[Example], vocab: &Vocab, lexicon: &Lexicon, max_len: usize) -> Result<(Vec<TokenSequence>, Vec<usize>)> {
    let mut seqs = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    for ex in examples {
        seqs.push(encode(&ex.text, vocab, lexicon, max_len)?);
        golds.push(ex.label.index());
    }
    Ok((seqs, golds))
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Fine-tunes on `(seqs, golds)`. After each epoch `after_epoch(epoch, model)`
/// may return `true` to stop early.
pub fn fit_classifier<F>(
    trainer: &mut Trainer,
    seqs: &[TokenSequence],
    golds: &[usize],
    cfg: &TrainConfig,
    variant: &str,
    mut after_epoch: F,
) -> Result<Vec<LossRow>>
where
    F: FnMut(usize, &Model) -> Result<bool>,
{
    cfg.validate()?;
    if seqs.len() != golds.len() || seqs.is_empty() {
        return Err(Error::Input(format!("{} sequences for {} labels", seqs.len(), golds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        for chunk in shuffled(seqs.len(), &mut rng).chunks(cfg.batch_size) {
            let ids: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].ids.as_slice()).collect();
            let batch_golds: Vec<usize> = chunk.iter().map(|&i| golds[i]).collect();
            let batch = Batch::new(&ids)?;
            let step = trainer.steps();
            let l = trainer.train_step(&batch, Task::Classify { golds: &batch_golds })?;
            rows.push(LossRow::new(epoch, step, l, variant));
        }
        log::debug!("{variant}: epoch {epoch} done after {} steps", trainer.steps());
        if after_epoch(epoch, &trainer.model)? {
            break;
        }
    }
    Ok(rows)
}

/// Masked-language-model pretraining. Masks are redrawn every epoch;
/// sequences without content are skipped.
pub fn pretrain_mlm(
    trainer: &mut Trainer,
    seqs: &[TokenSequence],
    vocab: &Vocab,
    mask: &MaskConfig,
    whole_word: bool,
    cfg: &TrainConfig,
    variant: &str,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    mask.validate()?;
    let usable: Vec<&TokenSequence> = seqs.iter().filter(|s| s.content_len() > 0).collect();
    if usable.is_empty() {
        return Err(Error::Input("no sequences with content to pretrain on".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        for chunk in shuffled(usable.len(), &mut order_rng).chunks(cfg.batch_size) {
            let masked = chunk
                .iter()
                .map(|&i| mask_sequence(usable[i], vocab, mask, whole_word, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<&[u32]> = masked.iter().map(|m| m.ids.as_slice()).collect();
            let batch = Batch::new(&ids)?;
            let t = batch.seq_len();
            let mut labels = vec![None; batch.size() * t];
            for (row, m) in masked.iter().enumerate() {
                labels[row * t..row * t + m.labels.len()].copy_from_slice(&m.labels);
            }
            let step = trainer.steps();
            let l = trainer.train_step(&batch, Task::Mlm { labels: &labels })?;
            rows.push(LossRow::new(epoch, step, l, variant));
        }
        log::debug!("{variant}: pretraining epoch {epoch} done");
    }
    Ok(rows)
}

/// Evaluation-mode predictions in batches.
pub fn predict(model: &Model, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let ids: Vec<&[u32]> = chunk.iter().map(|s| s.ids.as_slice()).collect();
        out.extend(model.predict(&Batch::new(&ids)?)?);
    }
    Ok(out)
}

/// Predictions under an FGM attack built from each batch's gold labels.
pub fn attack_predict(model: &Model, seqs: &[TokenSequence], golds: &[usize], attack: &AdvConfig, batch_size: usize) -> Result<Vec<usize>> {
    if seqs.len() != golds.len() {
        return Err(Error::Input(format!("{} sequences for {} labels", seqs.len(), golds.len())));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for (chunk, gchunk) in seqs.chunks(batch_size.max(1)).zip(golds.chunks(batch_size.max(1))) {
        let ids: Vec<&[u32]> = chunk.iter().map(|s| s.ids.as_slice()).collect();
        out.extend(attacked_predictions(model, &Batch::new(&ids)?, gchunk, attack)?);
    }
    Ok(out)
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64
}
