//! Embeddings, pre-norm transformer encoder, BiLSTM (or mean-pool) head, MLP
//! classifier and the masked-language-model projection.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::PAD;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    class_loss, classify, classify_with_sites, embed, embed_with_site, encode, encode_with_site, mlm_loss, probabilities,
    ClassifierOut, EncoderOut, Mode, SiteOffsets,
};

/// How the encoder output is pooled before the MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Lstm,
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// per direction
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub head: HeadKind,
    pub bidirectional: bool,
}

/// Defaults with `vocab_size` 0, which must be set before use.
impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl ModelConfig {
    /// Desk-scale defaults: hidden 64, 2 layers, 4 heads, max_len 64, dropout 0.5.
    pub fn new(vocab_size: usize) -> Self {
        Self::with_hidden(vocab_size, 64)
    }

    /// Defaults derived from `hidden`: ff 4x, LSTM hidden/2 per direction, MLP hidden.
    pub fn with_hidden(vocab_size: usize, hidden: usize) -> Self {
        Self {
            vocab_size,
            max_len: 64,
            hidden,
            layers: 2,
            heads: 4,
            ff_dim: 4 * hidden,
            lstm_hidden: (hidden / 2).max(1),
            mlp_hidden: hidden,
            num_classes: 3,
            dropout: 0.5,
            head: HeadKind::Lstm,
            bidirectional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the pooled vector fed to the MLP.
    pub fn pooled_dim(&self) -> usize {
        match self.head {
            HeadKind::MeanPool => self.hidden,
            HeadKind::Lstm if self.bidirectional => 2 * self.lstm_hidden,
            HeadKind::Lstm => self.lstm_hidden,
        }
    }

    /// Every parameter name with its shape and initializer, in a fixed order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (v, h, f) = (self.vocab_size, self.hidden, self.ff_dim);
        let w = Init::Normal(0.02);
        let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
        let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
            push(format!("{prefix}.gain"), vec![h], Init::Ones);
            push(format!("{prefix}.shift"), vec![h], Init::Zeros);
        };

        push("embeddings.token".into(), vec![v, h], w);
        push("embeddings.position".into(), vec![self.max_len, h], w);
        norm(&mut push, "embeddings.norm");
        for l in 0..self.layers {
            let p = format!("encoder.{l}");
            norm(&mut push, &format!("{p}.attn_norm"));
            for proj in ["query", "key", "value", "output"] {
                push(format!("{p}.attn.{proj}.weight"), vec![h, h], w);
                push(format!("{p}.attn.{proj}.bias"), vec![h], Init::Zeros);
            }
            norm(&mut push, &format!("{p}.ffn_norm"));
            push(format!("{p}.ffn.inner.weight"), vec![h, f], w);
            push(format!("{p}.ffn.inner.bias"), vec![f], Init::Zeros);
            push(format!("{p}.ffn.outer.weight"), vec![f, h], w);
            push(format!("{p}.ffn.outer.bias"), vec![h], Init::Zeros);
        }
        norm(&mut push, "encoder.final_norm");
        push("mlm.weight".into(), vec![h, v], w);
        push("mlm.bias".into(), vec![v], Init::Zeros);
        if self.head == HeadKind::Lstm {
            let lh = self.lstm_hidden;
            let bound = 1.0 / (lh as f64).sqrt();
            let dirs: &[&str] = if self.bidirectional { &["forward", "backward"] } else { &["forward"] };
            for d in dirs {
                push(format!("lstm.{d}.input"), vec![h, 4 * lh], Init::Uniform(bound));
                push(format!("lstm.{d}.recurrent"), vec![lh, 4 * lh], Init::Uniform(bound));
                push(format!("lstm.{d}.bias"), vec![4 * lh], Init::Zeros);
            }
        }
        let pd = self.pooled_dim();
        push("mlp.hidden.weight".into(), vec![pd, self.mlp_hidden], Init::Normal(1.0 / (pd as f64).sqrt()));
        push("mlp.hidden.bias".into(), vec![self.mlp_hidden], Init::Zeros);
        push(
            "mlp.output.weight".into(),
            vec![self.mlp_hidden, self.num_classes],
            Init::Normal(1.0 / (self.mlp_hidden as f64).sqrt()),
        );
        push("mlp.output.bias".into(), vec![self.num_classes], Init::Zeros);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// All learnable tensors by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .parameter_specs()
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::ones(&shape),
                    Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
                    Init::Uniform(b) => Tensor::uniform(&shape, b, &mut rng),
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    /// Checks names, shapes and finiteness against `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let specs = config.parameter_specs();
        let missing: Vec<&str> = specs
            .iter()
            .filter(|(n, _, _)| !tensors.contains_key(n))
            .map(|(n, _, _)| n.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
        }
        if let Some(name) = tensors.keys().find(|k| !specs.iter().any(|(n, _, _)| n == *k)) {
            return Err(Error::Checkpoint(format!("unknown tensor name {name}")));
        }
        for (name, shape, _) in &specs {
            let t = &tensors[name];
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies same-named, same-shaped tensors from `other` whose names start
    /// with one of `prefixes`; returns how many were copied.
    pub fn copy_matching(&mut self, other: &ModelParams, prefixes: &[&str]) -> usize {
        let mut n = 0;
        for (name, t) in self.tensors.iter_mut() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            if let Some(src) = other.tensors.get(name) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), graph.leaf(t.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant; no parameter gradients are computed.
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), graph.constant(t.clone())))
                .collect(),
        }
    }
}

/// Parameters registered on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds parameter names to vars created by the caller, in `ModelParams` name order.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().map(str::to_string).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Parameter gradients by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect()
    }
}

/// Token ids padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    ids: Vec<u32>,
    lengths: Vec<usize>,
    seq_len: usize,
}

impl Batch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        Self::padded(seqs, 0)
    }

    /// Pads every sequence to at least `min_len` positions.
    pub fn padded<S: AsRef<[u32]>>(seqs: &[S], min_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        let seq_len = lengths.iter().copied().max().unwrap_or(0).max(min_len).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
        }
        Ok(Self { ids, lengths, seq_len })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Flattened `[batch, seq_len]` ids.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Parameter name prefixes learned during pretraining.
pub const PRETRAINED_PREFIXES: [&str; 3] = ["embeddings.", "encoder.", "mlm."];

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Evaluation-mode classifier logits `[batch, num_classes]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::untracked();
        let bound = self.params.bind(&mut g);
        let out = classify(&mut g, &bound, &self.config, batch, Mode::Eval, &SiteOffsets::default())?;
        Ok(g.value(out.logits).clone())
    }

    /// Argmax class per example; ties go to the lower index.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| (0..c).fold(0, |b, k| if row[k] > row[b] { k } else { b }))
        .collect()
}
