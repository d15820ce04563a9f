use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, Bound, HeadKind, ModelConfig};
use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MASKED_LOGIT: f64 = -1e9;

/// Dropout is active only in `Train`; the seed fixes every dropout mask of a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

impl Mode {
    fn rng(self) -> Option<ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

/// Additive offsets at the two perturbation sites. Each site is always a
/// differentiable leaf (zero when absent), so its gradient is the gradient with
/// respect to the site activation.
#[derive(Clone, Debug, Default)]
pub struct SiteOffsets {
    pub embedding: Option<Tensor>,
    pub classifier_input: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOut {
    /// Perturbed embedding `[B, T, hidden]`.
    pub emb: Var,
    /// Offset leaf added to the embedding.
    pub emb_site: Var,
    /// Encoder output `[B, T, hidden]`.
    pub hidden: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOut {
    pub encoder: EncoderOut,
    /// Pooled vector `[B, pooled_dim]` after the classifier-input offset.
    pub pooled: Var,
    pub pooled_site: Var,
    /// `[B, num_classes]`
    pub logits: Var,
}

struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        g.dropout(x, self.p, self.rng.as_mut())
    }
}

fn site_leaf(g: &mut Graph, shape: &[usize], offset: Option<&Tensor>, site: &str) -> Result<Var> {
    match offset {
        Some(t) if t.shape() != shape => Err(Error::Input(format!(
            "{site} offset has shape {:?}, site activation is {shape:?}",
            t.shape()
        ))),
        Some(t) => Ok(g.leaf(t.clone())),
        None => Ok(g.leaf(Tensor::zeros(shape))),
    }
}

fn add_site(g: &mut Graph, x: Var, site: Var, name: &str) -> Result<Var> {
    if g.shape(x) != g.shape(site) {
        return Err(Error::Input(format!(
            "{name} offset has shape {:?}, site activation is {:?}",
            g.shape(site),
            g.shape(x)
        )));
    }
    g.add(x, site)
}

/// `x [.., in] · w [in, out] + b` for any leading shape.
fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (din, dout) = (shape[shape.len() - 1], g.shape(w)[1]);
    let rows = shape[..shape.len() - 1].iter().product::<usize>();
    let flat = g.reshape(x, &[rows, din])?;
    let y = g.matmul(flat, w)?;
    let y = g.add_bias(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = dout;
    g.reshape(y, &out_shape)
}

fn norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    g.layer_norm(x, p.var(&format!("{prefix}.gain")), p.var(&format!("{prefix}.shift")))
}

fn check_ids(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    if batch.seq_len() > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_len {}",
            batch.seq_len(),
            cfg.max_len
        )));
    }
    let t = batch.seq_len();
    if let Some(i) = batch.ids().iter().position(|&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {} at batch row {} position {} is outside vocab of size {}",
            batch.ids()[i],
            i / t,
            i % t,
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Token plus position embedding, layer norm, dropout and the embedding-site
/// offset. The offset sits after the norm so epsilon is measured against
/// unit-scale activations. Returns the perturbed embedding and the offset leaf.
pub fn embed(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    offset: Option<&Tensor>,
) -> Result<(Var, Var)> {
    let site = site_leaf(g, &[batch.size(), batch.seq_len(), cfg.hidden], offset, "embedding")?;
    Ok((embed_with_site(g, p, cfg, batch, mode, site)?, site))
}

/// `embed` with a caller-owned offset var of shape `[B, T, hidden]`.
pub fn embed_with_site(g: &mut Graph, p: &Bound, cfg: &ModelConfig, batch: &Batch, mode: Mode, site: Var) -> Result<Var> {
    check_ids(cfg, batch)?;
    let (b, t, h) = (batch.size(), batch.seq_len(), cfg.hidden);
    let ids: Vec<usize> = batch.ids().iter().map(|&i| i as usize).collect();
    let tok = g.gather(p.var("embeddings.token"), &ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
    let pos = g.gather(p.var("embeddings.position"), &positions)?;
    let x = g.add(tok, pos)?;
    let x = g.reshape(x, &[b, t, h])?;
    let x = norm(g, p, "embeddings.norm", x)?;
    let mut drop = Dropout {
        p: cfg.dropout,
        rng: mode.rng(),
    };
    let x = drop.apply(g, x)?;
    add_site(g, x, site, "embedding")
}

/// Additive attention mask `[B, T, T]`: PAD keys get a large negative logit.
fn key_mask(batch: &Batch) -> Tensor {
    let (b, t) = (batch.size(), batch.seq_len());
    let mut data = vec![0.0; b * t * t];
    for (row, &len) in batch.lengths().iter().enumerate() {
        for q in 0..t {
            let base = (row * t + q) * t;
            data[base + len..base + t].fill(MASKED_LOGIT);
        }
    }
    Tensor::from_parts(vec![b, t, t], data)
}

fn attention(g: &mut Graph, p: &Bound, cfg: &ModelConfig, prefix: &str, x: Var, mask: Option<Var>) -> Result<Var> {
    let proj = |g: &mut Graph, name: &str, x: Var| {
        linear(
            g,
            x,
            p.var(&format!("{prefix}.attn.{name}.weight")),
            p.var(&format!("{prefix}.attn.{name}.bias")),
        )
    };
    let q = proj(g, "query", x)?;
    let k = proj(g, "key", x)?;
    let v = proj(g, "value", x)?;
    let dh = cfg.hidden / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = g.slice(q, 2, head * dh, dh)?;
        let kh = g.slice(k, 2, head * dh, dh)?;
        let vh = g.slice(v, 2, head * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = g.concat(&heads, 2)?;
    proj(g, "output", joined)
}

/// Pre-norm transformer blocks followed by a final layer norm.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    offset: Option<&Tensor>,
) -> Result<EncoderOut> {
    let site = site_leaf(g, &[batch.size(), batch.seq_len(), cfg.hidden], offset, "embedding")?;
    encode_with_site(g, p, cfg, batch, mode, site)
}

/// `encode` with a caller-owned embedding offset var.
pub fn encode_with_site(g: &mut Graph, p: &Bound, cfg: &ModelConfig, batch: &Batch, mode: Mode, emb_site: Var) -> Result<EncoderOut> {
    let emb = embed_with_site(g, p, cfg, batch, mode, emb_site)?;
    // a different stream from the embedding dropout, still fixed by the pass seed
    let mut drop = Dropout {
        p: cfg.dropout,
        rng: match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed ^ 0x656e_636f_6465_7200)),
        },
    };
    let mask = if batch.lengths().iter().all(|&l| l == batch.seq_len()) {
        None
    } else {
        Some(g.constant(key_mask(batch)))
    };
    let mut x = emb;
    for l in 0..cfg.layers {
        let prefix = format!("encoder.{l}");
        let a = norm(g, p, &format!("{prefix}.attn_norm"), x)?;
        let a = attention(g, p, cfg, &prefix, a, mask)?;
        let a = drop.apply(g, a)?;
        x = g.add(x, a)?;
        let f = norm(g, p, &format!("{prefix}.ffn_norm"), x)?;
        let f = linear(
            g,
            f,
            p.var(&format!("{prefix}.ffn.inner.weight")),
            p.var(&format!("{prefix}.ffn.inner.bias")),
        )?;
        let f = g.gelu(f);
        let f = linear(
            g,
            f,
            p.var(&format!("{prefix}.ffn.outer.weight")),
            p.var(&format!("{prefix}.ffn.outer.bias")),
        )?;
        let f = drop.apply(g, f)?;
        x = g.add(x, f)?;
    }
    let hidden = norm(g, p, "encoder.final_norm", x)?;
    Ok(EncoderOut { emb, emb_site, hidden })
}

/// Per-step validity masks `[B, units]` for steps where some row has ended.
fn step_mask(lengths: &[usize], t: usize, units: usize) -> Option<(Tensor, Tensor)> {
    if lengths.iter().all(|&l| t < l) {
        return None;
    }
    let keep: Vec<f64> = lengths
        .iter()
        .flat_map(|&l| std::iter::repeat_n(if t < l { 1.0 } else { 0.0 }, units))
        .collect();
    let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let shape = vec![lengths.len(), units];
    Some((Tensor::from_parts(shape.clone(), keep), Tensor::from_parts(shape, hold)))
}

/// Runs one LSTM direction over the valid prefix of every row and returns the final hidden state.
fn lstm_direction(g: &mut Graph, p: &Bound, cfg: &ModelConfig, dir: &str, h_seq: Var, batch: &Batch, reverse: bool) -> Result<Var> {
    let (b, t, u) = (batch.size(), batch.seq_len(), cfg.lstm_hidden);
    let xw = linear(
        g,
        h_seq,
        p.var(&format!("lstm.{dir}.input")),
        p.var(&format!("lstm.{dir}.bias")),
    )?;
    let w_hh = p.var(&format!("lstm.{dir}.recurrent"));
    let mut h = g.constant(Tensor::zeros(&[b, u]));
    let mut c = g.constant(Tensor::zeros(&[b, u]));
    let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in steps {
        let x_t = g.slice(xw, 1, step, 1)?;
        let x_t = g.reshape(x_t, &[b, 4 * u])?;
        let rec = g.matmul(h, w_hh)?;
        let gates = g.add(x_t, rec)?;
        let i = g.slice(gates, 1, 0, u)?;
        let i = g.sigmoid(i);
        let f = g.slice(gates, 1, u, u)?;
        let f = g.sigmoid(f);
        let cand = g.slice(gates, 1, 2 * u, u)?;
        let cand = g.tanh(cand);
        let o = g.slice(gates, 1, 3 * u, u)?;
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c_new = g.add(fc, ic)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        match step_mask(batch.lengths(), step, u) {
            None => {
                c = c_new;
                h = h_new;
            }
            Some((keep, hold)) => {
                let keep = g.constant(keep);
                let hold = g.constant(hold);
                c = blend(g, keep, hold, c_new, c)?;
                h = blend(g, keep, hold, h_new, h)?;
            }
        }
    }
    Ok(h)
}

fn blend(g: &mut Graph, keep: Var, hold: Var, new: Var, old: Var) -> Result<Var> {
    let a = g.mul(keep, new)?;
    let b = g.mul(hold, old)?;
    g.add(a, b)
}

fn mean_pool(g: &mut Graph, hidden: Var, batch: &Batch) -> Result<Var> {
    let (b, t) = (batch.size(), batch.seq_len());
    let mut w = vec![0.0; b * t];
    for (row, &len) in batch.lengths().iter().enumerate() {
        w[row * t..row * t + len].fill(1.0 / len as f64);
    }
    let w = g.constant(Tensor::from_parts(vec![b, 1, t], w));
    let pooled = g.matmul(w, hidden)?;
    let h = g.shape(hidden)[2];
    g.reshape(pooled, &[b, h])
}

/// Encoder, pooling head, classifier-input offset and MLP.
pub fn classify(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    offsets: &SiteOffsets,
) -> Result<ClassifierOut> {
    let (b, t) = (batch.size(), batch.seq_len());
    let emb_site = site_leaf(g, &[b, t, cfg.hidden], offsets.embedding.as_ref(), "embedding")?;
    let pooled_site = site_leaf(g, &[b, cfg.pooled_dim()], offsets.classifier_input.as_ref(), "classifier_input")?;
    classify_with_sites(g, p, cfg, batch, mode, emb_site, pooled_site)
}

/// `classify` with caller-owned offset vars `[B, T, hidden]` and `[B, pooled_dim]`.
pub fn classify_with_sites(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: Mode,
    emb_site: Var,
    pooled_site: Var,
) -> Result<ClassifierOut> {
    if let Some(row) = batch.lengths().iter().position(|&l| l == 0) {
        return Err(Error::Input(format!("batch row {row} is an all-PAD sequence")));
    }
    let encoder = encode_with_site(g, p, cfg, batch, mode, emb_site)?;
    let pooled = match cfg.head {
        HeadKind::MeanPool => mean_pool(g, encoder.hidden, batch)?,
        HeadKind::Lstm => {
            let fwd = lstm_direction(g, p, cfg, "forward", encoder.hidden, batch, false)?;
            if cfg.bidirectional {
                let bwd = lstm_direction(g, p, cfg, "backward", encoder.hidden, batch, true)?;
                g.concat(&[fwd, bwd], 1)?
            } else {
                fwd
            }
        }
    };
    let pooled = add_site(g, pooled, pooled_site, "classifier_input")?;
    let mut drop = Dropout {
        p: cfg.dropout,
        rng: match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6173_7369_6679)),
        },
    };
    let x = drop.apply(g, pooled)?;
    let x = linear(g, x, p.var("mlp.hidden.weight"), p.var("mlp.hidden.bias"))?;
    let x = g.gelu(x);
    let logits = linear(g, x, p.var("mlp.output.weight"), p.var("mlp.output.bias"))?;
    Ok(ClassifierOut {
        encoder,
        pooled,
        pooled_site,
        logits,
    })
}

/// Mean cross-entropy over the batch.
pub fn class_loss(g: &mut Graph, logits: Var, golds: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, golds)
}

/// Mean cross-entropy of the vocabulary projection at labelled positions.
/// `labels` is flattened `[B, T]`.
pub fn mlm_loss(g: &mut Graph, p: &Bound, hidden: Var, labels: &[Option<u32>]) -> Result<Var> {
    let shape = g.shape(hidden).to_vec();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    if labels.len() != rows {
        return Err(Error::Input(format!(
            "{} MLM labels for {rows} positions",
            labels.len()
        )));
    }
    let (positions, targets): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|id| (i, id as usize)))
        .unzip();
    if positions.is_empty() {
        return Err(Error::Input("MLM batch has no labelled positions".into()));
    }
    let flat = g.reshape(hidden, &[rows, shape[shape.len() - 1]])?;
    let picked = g.gather(flat, &positions)?;
    let logits = linear(g, picked, p.var("mlm.weight"), p.var("mlm.bias"))?;
    g.cross_entropy(logits, &targets)
}

/// Row-wise softmax of logits `[B, C]`.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}
