//! Fast-gradient-method perturbations and the clean + adversarial training step.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, Error, Result};
use crate::model::{class_loss, classify, encode, mlm_loss, Batch, Bound, Mode, Model, ModelConfig, SiteOffsets};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Embedding,
    ClassifierInput,
}

/// Scope of the L2 norm used to normalize a batched gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// One norm over each example's whole gradient.
    Example,
    /// One norm per position (last axis).
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub lambda: f64,
    pub sites: Vec<Site>,
    pub norm: NormScope,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: 0.17,
            lambda: 1.0,
            sites: vec![Site::Embedding],
            norm: NormScope::Example,
        }
    }
}

impl AdvConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.enabled {
            if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
                return Err(config_err(format!(
                    "adversarial training is enabled with epsilon {}; epsilon must be > 0",
                    self.epsilon
                )));
            }
            if self.sites.is_empty() {
                return Err(config_err("adversarial training is enabled with no perturbation sites"));
            }
        }
        Ok(())
    }
}

/// Gradient at a site and the perturbation built from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub site: Site,
    pub gradient: Tensor,
    pub delta: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_clean: f64,
    pub loss_adv: f64,
    pub loss_total: f64,
}

/// The stage loss: classification during fine-tuning, MLM during pretraining.
#[derive(Clone, Copy, Debug)]
pub enum Task<'a> {
    Classify { golds: &'a [usize] },
    /// Labels flattened `[B, T]`.
    Mlm { labels: &'a [Option<u32>] },
}

/// `epsilon * g / ||g||`, with the norm over the whole tensor; zero stays zero.
pub fn fgm(g: &Tensor, epsilon: f64) -> Tensor {
    let norm = g.norm_l2();
    if norm == 0.0 {
        Tensor::zeros(g.shape())
    } else {
        g.scale(epsilon / norm)
    }
}

/// FGM applied independently to each example (axis 0) or each position (last axis).
pub fn fgm_scoped(g: &Tensor, epsilon: f64, scope: NormScope) -> Tensor {
    let chunk = match scope {
        NormScope::Example => g.len() / g.shape()[0].max(1),
        NormScope::Token => *g.shape().last().unwrap_or(&1),
    }
    .max(1);
    let mut out = g.clone();
    for part in out.data_mut().chunks_mut(chunk) {
        let norm = part.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            part.fill(0.0);
        } else {
            let c = epsilon / norm;
            part.iter_mut().for_each(|x| *x *= c);
        }
    }
    out
}

pub struct StageOut {
    pub loss: Var,
    pub emb_site: Var,
    pub cls_site: Option<Var>,
    pub logits: Option<Var>,
}

impl StageOut {
    pub fn site(&self, site: Site) -> Result<Var> {
        match site {
            Site::Embedding => Ok(self.emb_site),
            Site::ClassifierInput => self
                .cls_site
                .ok_or_else(|| Error::Input("site mismatch: the MLM stage has no classifier_input site".into())),
        }
    }
}

/// Forward pass of the stage loss with optional site offsets.
pub fn stage_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    task: Task,
    mode: Mode,
    offsets: &SiteOffsets,
) -> Result<StageOut> {
    match task {
        Task::Classify { golds } => {
            let out = classify(g, p, cfg, batch, mode, offsets)?;
            Ok(StageOut {
                loss: class_loss(g, out.logits, golds)?,
                emb_site: out.encoder.emb_site,
                cls_site: Some(out.pooled_site),
                logits: Some(out.logits),
            })
        }
        Task::Mlm { labels } => {
            if offsets.classifier_input.is_some() {
                return Err(Error::Input("site mismatch: the MLM stage has no classifier_input site".into()));
            }
            let enc = encode(g, p, cfg, batch, mode, offsets.embedding.as_ref())?;
            Ok(StageOut {
                loss: mlm_loss(g, p, enc.hidden, labels)?,
                emb_site: enc.emb_site,
                cls_site: None,
                logits: None,
            })
        }
    }
}

/// Gradient of the stage loss at `site` with parameters held constant.
/// `batch_id` labels the error if the gradient is not finite.
pub fn input_gradient(model: &Model, batch: &Batch, task: Task, site: Site, mode: Mode, batch_id: u64) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let out = stage_forward(&mut g, &p, &model.config, batch, task, mode, &SiteOffsets::default())?;
    let var = out.site(site)?;
    let grads = g.backward(out.loss)?;
    let grad = grads.wrt(var);
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient { batch: batch_id });
    }
    Ok(grad)
}

/// Stage loss with the perturbations added at their sites, parameters constant.
pub fn adv_loss(model: &Model, batch: &Batch, task: Task, perturbations: &[Perturbation], mode: Mode) -> Result<f64> {
    let mut g = Graph::untracked();
    let p = model.params.bind_frozen(&mut g);
    let out = stage_forward(&mut g, &p, &model.config, batch, task, mode, &offsets_of(perturbations))?;
    g.value(out.loss).item()
}

/// Clean stage loss, evaluation mode.
pub fn clean_loss(model: &Model, batch: &Batch, task: Task) -> Result<f64> {
    adv_loss(model, batch, task, &[], Mode::Eval)
}

fn offsets_of(perturbations: &[Perturbation]) -> SiteOffsets {
    let mut offsets = SiteOffsets::default();
    for p in perturbations {
        let slot = match p.site {
            Site::Embedding => &mut offsets.embedding,
            Site::ClassifierInput => &mut offsets.classifier_input,
        };
        *slot = Some(p.delta.clone());
    }
    offsets
}

/// Builds one perturbation per configured site from site gradients.
pub fn build_perturbations(cfg: &AdvConfig, gradients: BTreeMap<Site, Tensor>) -> Vec<Perturbation> {
    gradients
        .into_iter()
        .filter(|(site, _)| cfg.sites.contains(site))
        .map(|(site, gradient)| Perturbation {
            site,
            delta: fgm_scoped(&gradient, cfg.epsilon, cfg.norm),
            gradient,
        })
        .collect()
}

/// Predictions on inputs perturbed by FGM at `epsilon` against the gold labels.
pub fn attacked_predictions(model: &Model, batch: &Batch, golds: &[usize], cfg: &AdvConfig) -> Result<Vec<usize>> {
    let task = Task::Classify { golds };
    let mut grads = BTreeMap::new();
    for &site in &cfg.sites {
        grads.insert(site, input_gradient(model, batch, task, site, Mode::Eval, 0)?);
    }
    let perturbations = build_perturbations(cfg, grads);
    let mut g = Graph::untracked();
    let p = model.params.bind_frozen(&mut g);
    let out = classify(&mut g, &p, &model.config, batch, Mode::Eval, &offsets_of(&perturbations))?;
    Ok(crate::model::argmax_rows(g.value(out.logits)))
}

/// Owns the model and optimizer state and performs clean + adversarial updates.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub adv: AdvConfig,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Trainer {
    pub fn new(model: Model, adam: AdamConfig, adv: AdvConfig, seed: u64) -> Result<Self> {
        adv.validate()?;
        Ok(Self {
            model,
            optimizer: Adam::new(adam)?,
            adv,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clean pass, perturbation from the clean site gradients, perturbed pass
    /// with the same dropout masks, then one Adam step on
    /// `grad(loss_clean) + lambda * grad(loss_adv)`.
    pub fn train_step(&mut self, batch: &Batch, task: Task) -> Result<StepLosses> {
        let batch_id = self.steps;
        let mode = Mode::Train { seed: self.rng.next_u64() };
        let cfg = &self.model.config;

        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g);
        let out = stage_forward(&mut g, &p, cfg, batch, task, mode, &SiteOffsets::default())?;
        let loss_clean = g.value(out.loss).item()?;
        let grads = g.backward(out.loss)?;
        let mut total = p.gradients(&grads);

        let (loss_adv, loss_total) = if self.adv.enabled {
            let mut site_grads = BTreeMap::new();
            for &site in &self.adv.sites {
                let t = grads.wrt(out.site(site)?);
                if !t.is_finite() {
                    return Err(Error::NonFiniteGradient { batch: batch_id });
                }
                site_grads.insert(site, t);
            }
            drop(g);
            let perturbations = build_perturbations(&self.adv, site_grads);
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let out = stage_forward(&mut g, &p, cfg, batch, task, mode, &offsets_of(&perturbations))?;
            let loss_adv = g.value(out.loss).item()?;
            let adv_grads = p.gradients(&g.backward(out.loss)?);
            for (name, t) in total.iter_mut() {
                *t = t.add_scaled(&adv_grads[name], self.adv.lambda)?;
            }
            (loss_adv, loss_clean + self.adv.lambda * loss_adv)
        } else {
            (0.0, loss_clean)
        };

        if !loss_total.is_finite() || total.values().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteGradient { batch: batch_id });
        }
        self.optimizer.step(&mut self.model.params, &total)?;
        self.steps += 1;
        Ok(StepLosses {
            loss_clean,
            loss_adv,
            loss_total,
        })
    }
}

/// One row of an epsilon grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub epsilon: f64,
    /// Validation accuracy, absent when the run failed.
    pub score: Option<f64>,
    pub status: String,
}

/// Runs `train_and_score` once per candidate and returns the best epsilon
/// (ties to the smaller value) with the full table. Divergent runs are recorded
/// as failed.
pub fn grid_search_epsilon<F>(candidates: &[f64], mut train_and_score: F) -> Result<(f64, Vec<GridRow>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(config_err("epsilon grid is empty"));
    }
    let mut table = Vec::with_capacity(candidates.len());
    for &eps in candidates {
        let row = match train_and_score(eps) {
            Ok(s) if s.is_finite() => GridRow {
                epsilon: eps,
                score: Some(s),
                status: "ok".into(),
            },
            Ok(s) => GridRow {
                epsilon: eps,
                score: None,
                status: format!("failed: score {s}"),
            },
            Err(e @ Error::NonFiniteGradient { .. }) => GridRow {
                epsilon: eps,
                score: None,
                status: format!("failed: {e}"),
            },
            Err(e) => return Err(e),
        };
        table.push(row);
    }
    let best = table
        .iter()
        .filter_map(|r| r.score.map(|s| (r.epsilon, s)))
        .fold(None, |best: Option<(f64, f64)>, (e, s)| match best {
            Some((be, bs)) if bs > s || (bs == s && be <= e) => Some((be, bs)),
            _ => Some((e, s)),
        })
        .ok_or_else(|| Error::Autodiff("every epsilon candidate diverged".into()))?;
    Ok((best.0, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, ModelConfig};
    use proptest::prelude::*;

    fn tiny_model(seed: u64) -> Model {
        let mut cfg = ModelConfig::with_hidden(9, 8);
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.max_len = 8;
        Model::new(cfg, seed).unwrap()
    }

    fn batch() -> (Batch, Vec<usize>) {
        (
            Batch::new(&[vec![2u32, 5, 6, 3], vec![2u32, 7, 8, 6, 3], vec![2u32, 4, 3]]).unwrap(),
            vec![0, 2, 1],
        )
    }

    #[test]
    fn three_four_triangle() {
        let r = fgm(&Tensor::vector(vec![3.0, 4.0]), 0.17);
        assert!((r.data()[0] - 0.102).abs() < 1e-15);
        assert!((r.data()[1] - 0.136).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_zero_perturbation() {
        let r = fgm(&Tensor::zeros(&[2, 3]), 0.17);
        assert!(r.data().iter().all(|&x| x == 0.0));
        let r = fgm_scoped(&Tensor::zeros(&[2, 3, 4]), 0.17, NormScope::Token);
        assert!(r.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scoped_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        g.data_mut()[20..40].fill(0.0);
        let per_example = fgm_scoped(&g, 0.5, NormScope::Example);
        let norms: Vec<f64> = per_example
            .data()
            .chunks(20)
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        assert!((norms[0] - 0.5).abs() < 1e-12 && norms[1] == 0.0 && (norms[2] - 0.5).abs() < 1e-12);
        let per_token = fgm_scoped(&g, 0.5, NormScope::Token);
        for (i, c) in per_token.data().chunks(5).enumerate() {
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let expect = if (4..8).contains(&i) { 0.0 } else { 0.5 };
            assert!((n - expect).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn norm_parallel_and_scale_invariant(
            values in prop::collection::vec(-100.0f64..100.0, 1..64),
            eps in 1e-4f64..10.0,
            c in 1e-3f64..1e3,
        ) {
            let g = Tensor::vector(values);
            prop_assume!(g.norm_l2() > 0.0);
            let r = fgm(&g, eps);
            prop_assert!((r.norm_l2() - eps).abs() <= 1e-9 * eps);
            let cos = r.dot(&g).unwrap() / (r.norm_l2() * g.norm_l2());
            prop_assert!(cos >= 1.0 - 1e-9);
            let scaled = fgm(&g.scale(c), eps);
            prop_assert!(scaled.max_abs_diff(&r).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AdvConfig::default().validate().is_ok());
        let zero = AdvConfig {
            epsilon: 0.0,
            ..AdvConfig::default()
        };
        assert!(zero.validate().is_err());
        assert!(AdvConfig { enabled: false, ..zero }.validate().is_ok());
        let neg = AdvConfig {
            lambda: -1.0,
            ..AdvConfig::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn input_gradient_is_deterministic_and_leaves_params() {
        let model = tiny_model(1);
        let before = model.params.clone();
        let (b, golds) = batch();
        let task = Task::Classify { golds: &golds };
        let a = input_gradient(&model, &b, task, Site::Embedding, Mode::Eval, 0).unwrap();
        let c = input_gradient(&model, &b, task, Site::Embedding, Mode::Eval, 0).unwrap();
        assert_eq!(a, c);
        assert!(a.norm_l2() > 0.0);
        assert_eq!(model.params, before);
        assert_eq!(a.shape(), &[3, 5, 8]);
        let cls = input_gradient(&model, &b, task, Site::ClassifierInput, Mode::Eval, 0).unwrap();
        assert_eq!(cls.shape(), &[3, model.config.pooled_dim()]);
    }

    #[test]
    fn constant_head_gives_zero_gradient() {
        let mut model = tiny_model(2);
        for name in ["mlp.output.weight", "mlp.hidden.weight"] {
            let t = model.params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let (b, golds) = batch();
        let g = input_gradient(&model, &b, Task::Classify { golds: &golds }, Site::Embedding, Mode::Eval, 0).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = tiny_model(3);
        let (b, golds) = batch();
        let task = Task::Classify { golds: &golds };
        let g = input_gradient(&model, &b, task, Site::Embedding, Mode::Eval, 0).unwrap();
        let h = 1e-5;
        for idx in [0usize, 7, 19, 44, 80, 119] {
            let mut plus = Tensor::zeros(g.shape());
            plus.data_mut()[idx] = h;
            let lp = adv_loss(&model, &b, task, &[pert(plus.clone())], Mode::Eval).unwrap();
            let lm = adv_loss(&model, &b, task, &[pert(plus.scale(-1.0))], Mode::Eval).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let rel = crate::autodiff::relative_error(g.data()[idx], numeric);
            assert!(rel < 1e-4, "{idx}: {} vs {numeric}", g.data()[idx]);
        }
    }

    fn pert(delta: Tensor) -> Perturbation {
        Perturbation {
            site: Site::Embedding,
            gradient: Tensor::zeros(delta.shape()),
            delta,
        }
    }

    #[test]
    fn zero_perturbation_reproduces_clean_loss_exactly() {
        let model = tiny_model(4);
        let (b, golds) = batch();
        let task = Task::Classify { golds: &golds };
        let clean = clean_loss(&model, &b, task).unwrap();
        let adv = adv_loss(&model, &b, task, &[pert(Tensor::zeros(&[3, 5, 8]))], Mode::Eval).unwrap();
        assert_eq!(clean.to_bits(), adv.to_bits());
        let bad = adv_loss(&model, &b, task, &[pert(Tensor::zeros(&[3, 4, 8]))], Mode::Eval);
        assert!(bad.is_err());
    }

    #[test]
    fn mlm_stage_rejects_classifier_site() {
        let model = tiny_model(5);
        let b = Batch::new(&[vec![2u32, 4, 5, 3]]).unwrap();
        let labels = [None, Some(4), None, None];
        let task = Task::Mlm { labels: &labels };
        assert!(input_gradient(&model, &b, task, Site::ClassifierInput, Mode::Eval, 0).is_err());
        assert!(input_gradient(&model, &b, task, Site::Embedding, Mode::Eval, 0).is_ok());
    }

    fn run(adv: AdvConfig, steps: usize) -> (Model, Vec<StepLosses>) {
        let mut t = Trainer::new(tiny_model(6), AdamConfig::default(), adv, 42).unwrap();
        let (b, golds) = batch();
        let losses = (0..steps)
            .map(|_| t.train_step(&b, Task::Classify { golds: &golds }).unwrap())
            .collect();
        (t.model, losses)
    }

    #[test]
    fn loss_additivity() {
        let adv = AdvConfig {
            lambda: 0.7,
            sites: vec![Site::Embedding, Site::ClassifierInput],
            ..AdvConfig::default()
        };
        let (_, losses) = run(adv, 5);
        for l in losses {
            assert!((l.loss_total - (l.loss_clean + 0.7 * l.loss_adv)).abs() < 1e-12);
            assert!(l.loss_adv > 0.0);
        }
    }

    #[test]
    fn lambda_zero_matches_disabled() {
        let (a, la) = run(AdvConfig::disabled(), 4);
        let (b, lb) = run(
            AdvConfig {
                lambda: 0.0,
                ..AdvConfig::default()
            },
            4,
        );
        assert_eq!(a.params, b.params);
        for (x, y) in la.iter().zip(&lb) {
            assert_eq!(x.loss_clean.to_bits(), y.loss_clean.to_bits());
            assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
        }
        assert!(la.iter().all(|l| l.loss_adv == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let (a, la) = run(AdvConfig::default(), 3);
        let (b, lb) = run(AdvConfig::default(), 3);
        assert_eq!(a.params, b.params);
        assert_eq!(la, lb);
    }

    #[test]
    fn mean_pool_head_trains() {
        let mut model = tiny_model(7);
        model.config.head = HeadKind::MeanPool;
        model.params = crate::model::ModelParams::init(&model.config, 7).unwrap();
        let mut t = Trainer::new(model, AdamConfig::default(), AdvConfig::default(), 1).unwrap();
        let (b, golds) = batch();
        assert!(t.train_step(&b, Task::Classify { golds: &golds }).is_ok());
        assert_eq!(t.steps(), 1);
    }

    #[test]
    fn grid_search_ties_and_failures() {
        let (best, table) = grid_search_epsilon(&[0.17], |_| Ok(0.5)).unwrap();
        assert_eq!((best, table.len()), (0.17, 1));

        let scores = [0.6, 0.8, 0.8, f64::NAN];
        let mut i = 0;
        let (best, table) = grid_search_epsilon(&[0.05, 0.1, 0.17, 0.3, 0.5], |_| {
            i += 1;
            if i == 5 {
                return Err(Error::NonFiniteGradient { batch: 3 });
            }
            Ok(scores[i - 1])
        })
        .unwrap();
        assert_eq!(best, 0.1);
        assert_eq!(table.len(), 5);
        assert!(table[3].score.is_none() && table[4].score.is_none());
        assert!(table[4].status.starts_with("failed"));

        assert!(grid_search_epsilon(&[], |_| Ok(1.0)).is_err());
        assert!(grid_search_epsilon(&[0.1], |_| Err(config_err("bad"))).is_err());
    }
}
