//! Episodic training of the projection head.
//!
//! Per episode: embed supports and queries with the current head, estimate
//! class distributions from the embedded episode, draw samples, then take one
//! optimizer step on
//!
//! ```text
//! L_total = L_basic + lambda * L_gen
//! ```
//!
//! `L_basic` is the query cross-entropy against prototypes of the augmented
//! support set; `L_gen` is the cross-entropy of the generated samples against
//! prototypes of the original supports. Generated samples are constants: the
//! gradient reaches the head only through the real supports and queries.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingStore;
use crate::episodic::{self, ClassSplit, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::protocore::{self, ProjectionHead, PROB_FLOOR};
use crate::rng::{self, purpose};
use crate::sampler::{self, AugmentSettings, GeneratedSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub shape: EpisodeShape,
    pub augment: AugmentSettings,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Output width of the head; `None` keeps the input width.
    pub d_out: Option<usize>,
    pub l2_normalize: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.augment.method.strategy().is_some() && self.augment.n_gen > 0 && self.augment.r == 0 {
            return Err(Error::Config("R must be >= 1 when generating samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub l_basic: f64,
    pub l_gen: f64,
    pub l_total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,l_basic,l_gen,l_total,grad_norm\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:?},{:?},{:?},{:?}",
                r.episode, r.l_basic, r.l_gen, r.l_total, r.grad_norm
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn total_loss(l_basic: f64, l_gen: f64, lambda: f64) -> f64 {
    l_basic + lambda * l_gen
}

/// Mean cross-entropy of generated samples against `protos` (which must come
/// from the original supports). An empty set gives 0.
pub fn generation_loss(generated: &GeneratedSet, protos: &protocore::Prototypes) -> f64 {
    let total = generated.total();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (x, class) in generated.iter() {
        sum += nll(&protocore::log_softmax(&protocore::logits(x, protos)), class).0;
    }
    sum / total as f64
}

/// `(-log p_y, clamped)` with `p_y` floored at [`PROB_FLOOR`].
fn nll(log_probs: &[f64], y: usize) -> (f64, bool) {
    let cap = -PROB_FLOOR.ln();
    let value = -log_probs[y];
    if value > cap {
        (cap, true)
    } else {
        (value, false)
    }
}

/// Loss terms of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub l_basic: f64,
    pub l_gen: f64,
    pub l_total: f64,
}

/// Gradient with respect to W and b.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl HeadGradient {
    pub fn norm(&self) -> f64 {
        (self.w.norm_squared() + self.b.norm_squared()).sqrt()
    }

    /// Entry `i` in checkpoint order (W row-major, then b).
    pub fn get(&self, i: usize) -> f64 {
        let (rows, cols) = self.w.shape();
        if i < rows * cols {
            self.w[(i / cols, i % cols)]
        } else {
            self.b[i - rows * cols]
        }
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// Embedded view of an episode under a particular head.
#[derive(Debug, Clone)]
pub struct EmbeddedEpisode {
    pub n: usize,
    pub support: Vec<(DVector<f64>, usize)>,
    pub query: Vec<DVector<f64>>,
    pub query_labels: Vec<usize>,
}

impl EmbeddedEpisode {
    pub fn new(head: &ProjectionHead, episode: &Episode) -> Result<Self> {
        let support = episode
            .support
            .iter()
            .map(|item| Ok((head.project(&item.vector)?, item.class)))
            .collect::<Result<_>>()?;
        let query = episode
            .query
            .iter()
            .map(|item| head.project(&item.vector))
            .collect::<Result<_>>()?;
        Ok(Self {
            n: episode.n_way(),
            support,
            query,
            query_labels: episode.query_labels(),
        })
    }

    /// Estimate, sample and return the generated set for this episode.
    pub fn generate<R: Rng + ?Sized>(&self, settings: &AugmentSettings, rng: &mut R) -> Result<GeneratedSet> {
        sampler::generate_for_episode(&self.support, &self.query, self.n, settings, rng)
    }
}

/// Losses and their analytic gradient for fixed generated samples.
pub fn loss_and_gradient(
    head: &ProjectionHead,
    episode: &Episode,
    generated: &GeneratedSet,
    lambda: f64,
) -> Result<(Losses, HeadGradient)> {
    let embedded = EmbeddedEpisode::new(head, episode)?;
    let n = embedded.n;
    let d_out = head.d_out();

    let augmented = sampler::augment_support(&embedded.support, generated)?;
    let protos = protocore::compute_prototypes(augmented.iter().map(|(v, c)| (v, *c)), n)?;
    let mut class_sizes = vec![0usize; n];
    for (_, c) in &augmented {
        class_sizes[*c] += 1;
    }

    let mut grad_query: Vec<DVector<f64>> = Vec::with_capacity(embedded.query.len());
    let mut grad_protos = vec![DVector::<f64>::zeros(d_out); n];
    let n_query = embedded.query.len();
    let mut basic_sum = 0.0;
    for (e_q, &y) in embedded.query.iter().zip(&embedded.query_labels) {
        let logits = protocore::logits(e_q, &protos);
        let (value, clamped) = nll(&protocore::log_softmax(&logits), y);
        basic_sum += value;
        let mut g_q = DVector::zeros(d_out);
        if !clamped {
            let probs = protocore::softmax(&logits);
            for c in 0..n {
                let delta = (probs[c] - if c == y { 1.0 } else { 0.0 }) / n_query as f64;
                let diff = e_q - protos.get(c);
                // d(-||e_q - P_c||^2)/d e_q = -2 (e_q - P_c), and +2 (e_q - P_c) w.r.t. P_c
                g_q.axpy(-2.0 * delta, &diff, 1.0);
                grad_protos[c].axpy(2.0 * delta, &diff, 1.0);
            }
        }
        grad_query.push(g_q);
    }
    let l_basic = if n_query == 0 { 0.0 } else { basic_sum / n_query as f64 };

    let mut l_gen = 0.0;
    let mut grad_original = vec![DVector::<f64>::zeros(d_out); n];
    let mut support_counts = vec![0usize; n];
    for (_, c) in &embedded.support {
        support_counts[*c] += 1;
    }
    if !generated.is_empty() {
        let original = protocore::compute_prototypes(embedded.support.iter().map(|(v, c)| (v, *c)), n)?;
        l_gen = generation_loss(generated, &original);
        if lambda != 0.0 {
            let total = generated.total() as f64;
            for (x, y) in generated.iter() {
                let logits = protocore::logits(x, &original);
                if nll(&protocore::log_softmax(&logits), y).1 {
                    continue;
                }
                let probs = protocore::softmax(&logits);
                for c in 0..n {
                    let delta = lambda * (probs[c] - if c == y { 1.0 } else { 0.0 }) / total;
                    let diff = x - original.get(c);
                    grad_original[c].axpy(2.0 * delta, &diff, 1.0);
                }
            }
        }
    }

    let mut grad = HeadGradient {
        w: DMatrix::zeros(d_out, head.d_in()),
        b: DVector::zeros(d_out),
    };
    let mut accumulate = |g_e: &DVector<f64>, x: &DVector<f64>| {
        grad.w.ger(1.0, g_e, x, 1.0);
        grad.b += g_e;
    };
    for (item, &(_, c)) in episode.support.iter().zip(&embedded.support) {
        let mut g_e = &grad_protos[c] / class_sizes[c] as f64;
        if !generated.is_empty() && lambda != 0.0 {
            g_e.axpy(1.0 / support_counts[c] as f64, &grad_original[c], 1.0);
        }
        accumulate(&g_e, &item.vector);
    }
    for (item, g_e) in episode.query.iter().zip(&grad_query) {
        accumulate(g_e, &item.vector);
    }

    let losses = Losses {
        l_basic,
        l_gen,
        l_total: total_loss(l_basic, l_gen, lambda),
    };
    Ok((losses, grad))
}

/// Losses only, for fixed generated samples.
pub fn episode_losses(
    head: &ProjectionHead,
    episode: &Episode,
    generated: &GeneratedSet,
    lambda: f64,
) -> Result<Losses> {
    let embedded = EmbeddedEpisode::new(head, episode)?;
    let augmented = sampler::augment_support(&embedded.support, generated)?;
    let protos = protocore::compute_prototypes(augmented.iter().map(|(v, c)| (v, *c)), embedded.n)?;
    let mut basic_sum = 0.0;
    for (q, &y) in embedded.query.iter().zip(&embedded.query_labels) {
        basic_sum += nll(&protocore::log_softmax(&protocore::logits(q, &protos)), y).0;
    }
    let l_basic = basic_sum / embedded.query.len().max(1) as f64;
    let original = protocore::compute_prototypes(embedded.support.iter().map(|(v, c)| (v, *c)), embedded.n)?;
    let l_gen = generation_loss(generated, &original);
    Ok(Losses {
        l_basic,
        l_gen,
        l_total: total_loss(l_basic, l_gen, lambda),
    })
}

/// First-order optimizer over the flattened head parameters.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        weight_decay: f64,
    },
    /// Adam with decoupled weight decay.
    AdamW {
        lr: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<f64>,
        v: Vec<f64>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr, weight_decay },
            OptimizerKind::AdamW => Optimizer::AdamW {
                lr,
                weight_decay,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
        }
    }

    pub fn apply(&mut self, head: &mut ProjectionHead, grad: &HeadGradient) {
        match self {
            Optimizer::Sgd { lr, weight_decay } => {
                for i in 0..head.num_params() {
                    let theta = head.param_mut(i);
                    if *weight_decay != 0.0 {
                        *theta -= *lr * *weight_decay * *theta;
                    }
                    *theta -= *lr * grad.get(i);
                }
            }
            Optimizer::AdamW {
                lr,
                weight_decay,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let correction1 = 1.0 - beta1.powi(*step);
                let correction2 = 1.0 - beta2.powi(*step);
                for i in 0..head.num_params() {
                    let g = grad.get(i);
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let m_hat = m[i] / correction1;
                    let v_hat = v[i] / correction2;
                    let theta = head.param_mut(i);
                    *theta -= *lr * *weight_decay * *theta;
                    *theta -= *lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

/// One optimizer step on one episode. `generate_rng` drives the sampling of
/// synthetic supports.
pub fn episode_step<R: Rng + ?Sized>(
    head: &mut ProjectionHead,
    optimizer: &mut Optimizer,
    episode: &Episode,
    config: &TrainConfig,
    episode_index: usize,
    generate_rng: &mut R,
) -> Result<TraceRow> {
    if episode.n_way() != config.shape.n
        || episode.support.len() != config.shape.n * config.shape.k
        || episode.query.len() != config.shape.n * config.shape.q
    {
        return Err(Error::Config("episode does not match the configured shape".into()));
    }
    let generated = EmbeddedEpisode::new(head, episode)?.generate(&config.augment, generate_rng)?;
    let (losses, grad) = loss_and_gradient(head, episode, &generated, config.lambda)?;
    if !losses.l_total.is_finite() || !grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            episode: episode_index,
            l_basic: losses.l_basic,
            l_gen: losses.l_gen,
        });
    }
    optimizer.apply(head, &grad);
    Ok(TraceRow {
        episode: episode_index,
        l_basic: losses.l_basic,
        l_gen: losses.l_gen,
        l_total: losses.l_total,
        grad_norm: grad.norm(),
    })
}

/// Sample the training episode with index `t`.
pub fn training_episode(
    store: &EmbeddingStore,
    classes: &BTreeSet<String>,
    config: &TrainConfig,
    t: usize,
) -> Result<Episode> {
    let mut ep_rng = rng::stream(config.seed, purpose::TRAIN_EPISODE, &[t as u64]);
    let mut episode = episodic::sample_episode(store, classes, config.shape, &mut ep_rng)?;
    if config.l2_normalize {
        episode.l2_normalize();
    }
    Ok(episode)
}

/// Initial head for `config` over `d_in`-dimensional inputs.
pub fn initial_head(d_in: usize, config: &TrainConfig) -> ProjectionHead {
    let d_out = config.d_out.unwrap_or(d_in);
    ProjectionHead::init(d_in, d_out, &mut rng::stream(config.seed, purpose::INIT, &[]))
}

/// Train from the default initialization on episodes drawn from the seen
/// classes.
pub fn train(store: &EmbeddingStore, split: &ClassSplit, config: &TrainConfig) -> Result<(ProjectionHead, TrainTrace)> {
    train_from(initial_head(store.dim(), config), store, split, config)
}

pub fn train_from(
    mut head: ProjectionHead,
    store: &EmbeddingStore,
    split: &ClassSplit,
    config: &TrainConfig,
) -> Result<(ProjectionHead, TrainTrace)> {
    config.validate()?;
    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.weight_decay,
        head.num_params(),
    );
    let mut trace = TrainTrace::default();
    for t in 0..config.episodes {
        let episode = training_episode(store, &split.seen, config, t)?;
        let mut gen_rng = rng::stream(config.seed, purpose::TRAIN_GENERATE, &[t as u64]);
        let row = episode_step(&mut head, &mut optimizer, &episode, config, t, &mut gen_rng)?;
        log::debug!(
            "episode {t}: basic={:.5} gen={:.5} total={:.5} |g|={:.3e}",
            row.l_basic,
            row.l_gen,
            row.l_total,
            row.grad_norm
        );
        trace.rows.push(row);
    }
    Ok((head, trace))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare `analytic` against central differences of `objective` at the
/// given parameter indices, with step `1e-5 * (1 + |theta|)`.
pub fn check_gradient<F>(
    head: &ProjectionHead,
    objective: F,
    analytic: &HeadGradient,
    params: &[usize],
    tolerance: f64,
) -> Result<GradientReport>
where
    F: Fn(&ProjectionHead) -> Result<f64>,
{
    let mut probes = Vec::with_capacity(params.len());
    let mut probe_head = head.clone();
    for &param in params {
        let theta = head.param(param);
        let h = 1e-5 * (1.0 + theta.abs());
        *probe_head.param_mut(param) = theta + h;
        let plus = objective(&probe_head)?;
        *probe_head.param_mut(param) = theta - h;
        let minus = objective(&probe_head)?;
        *probe_head.param_mut(param) = theta;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = analytic.get(param);
        probes.push(Probe {
            param,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        probes,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

/// Finite-difference check of the `L_total` gradient on one episode. Samples
/// are generated once from the unperturbed head and then held fixed.
pub fn gradient_check<R: Rng + ?Sized>(
    head: &ProjectionHead,
    episode: &Episode,
    config: &TrainConfig,
    probes: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<GradientReport> {
    if probes == 0 {
        return Err(Error::Config("gradient check needs at least one probe".into()));
    }
    let generated = EmbeddedEpisode::new(head, episode)?.generate(&config.augment, rng)?;
    let (_, analytic) = loss_and_gradient(head, episode, &generated, config.lambda)?;
    let total = head.num_params();
    let params: Vec<usize> = if probes >= total {
        (0..total).collect()
    } else {
        index::sample(rng, total, probes).into_vec()
    };
    // Without generated samples the loss is invariant to translating every
    // embedding, so d/db is exactly zero and finite differences only measure
    // rounding noise. Bias probes are then compared against 0 directly.
    let bias_start = head.d_out() * head.d_in();
    let (fd_params, bias_params): (Vec<usize>, Vec<usize>) =
        params.iter().partition(|&&p| !generated.is_empty() || p < bias_start);
    let mut report = check_gradient(
        head,
        |h| Ok(episode_losses(h, episode, &generated, config.lambda)?.l_total),
        &analytic,
        &fd_params,
        tolerance,
    )?;
    for param in bias_params {
        let analytic = analytic.get(param);
        let rel_error = relative_error(analytic, 0.0);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.probes.push(Probe {
            param,
            analytic,
            numeric: 0.0,
            rel_error,
        });
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
