//! Episodic evaluation, synthetic benchmark stores and reporting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::embedstore::{EmbeddingRecord, EmbeddingStore};
use crate::episodic::{self, ClassSplit, Episode, EpisodeShape};
use crate::error::{Error, Result};
use crate::estimator::{self, Method};
use crate::protocore::{self, ProjectionHead};
use crate::rng::{self, purpose};
use crate::sampler::{self, AugmentSettings, Gaussian};
use crate::trainer::EmbeddedEpisode;

/// Named `(Q, R)` pairs for the two text regimes: long documents and short
/// intents.
pub const PRESETS: [(&str, usize, usize); 2] = [("news", 25, 10), ("intent", 5, 4)];

pub fn preset(name: &str) -> Option<(usize, usize)> {
    PRESETS.iter().find(|(n, _, _)| *n == name).map(|&(_, q, r)| (q, r))
}

/// Generated samples per class: 20 per shot (20 at 1-shot, 100 at 5-shot).
pub fn default_n_gen(k: usize) -> usize {
    20 * k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub shape: EpisodeShape,
    pub augment: AugmentSettings,
    pub episodes: usize,
    pub runs: usize,
    pub seed: u64,
    pub l2_normalize: bool,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.runs == 0 {
            return Err(Error::Config("episodes and runs must be >= 1".into()));
        }
        if !self.augment.is_inert() && self.augment.r == 0 {
            return Err(Error::Config("R must be >= 1 when generating samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub predicted: Vec<usize>,
    pub accuracy: f64,
}

/// Classify every query of `episode`. Augmentation (if any) estimates each
/// class from its supports and the whole unlabeled query pool.
pub fn predict_episode<R: Rng + ?Sized>(
    head: &ProjectionHead,
    episode: &Episode,
    settings: &AugmentSettings,
    rng: &mut R,
) -> Result<Prediction> {
    let embedded = EmbeddedEpisode::new(head, episode)?;
    let protos = if settings.method == Method::Baseline {
        protocore::compute_prototypes(embedded.support.iter().map(|(v, c)| (v, *c)), embedded.n)?
    } else {
        let generated = embedded.generate(settings, rng)?;
        let augmented = sampler::augment_support(&embedded.support, &generated)?;
        protocore::compute_prototypes(augmented.iter().map(|(v, c)| (v, *c)), embedded.n)?
    };
    let predicted: Vec<usize> = embedded
        .query
        .iter()
        .map(|q| protocore::argmax(&protocore::classify(q, &protos)))
        .collect();
    let correct = predicted
        .iter()
        .zip(&embedded.query_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(Prediction {
        accuracy: correct as f64 / predicted.len().max(1) as f64,
        predicted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub mean: f64,
    pub episode_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub runs: Vec<RunResult>,
    /// Mean of the run means.
    pub mean: f64,
    /// Sample standard deviation of the run means.
    pub std: f64,
    /// Half-width of the 95% Student-t interval over run means.
    pub ci95: f64,
}

impl EvalReport {
    pub fn from_runs(per_run: Vec<Vec<f64>>) -> Self {
        let runs: Vec<RunResult> = per_run
            .into_iter()
            .map(|acc| RunResult {
                mean: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
                episode_accuracies: acc,
            })
            .collect();
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.mean).sum::<f64>() / n;
        let (std, ci95) = if runs.len() > 1 {
            let var = runs.iter().map(|r| (r.mean - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let std = var.sqrt();
            let t = StudentsT::new(0.0, 1.0, n - 1.0)
                .expect("valid degrees of freedom")
                .inverse_cdf(0.975);
            (std, t * std / n.sqrt())
        } else {
            (0.0, 0.0)
        };
        Self { runs, mean, std, ci95 }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,episode,accuracy\n");
        for (r, run) in self.runs.iter().enumerate() {
            for (e, acc) in run.episode_accuracies.iter().enumerate() {
                let _ = writeln!(out, "{r},{e},{acc:?}");
            }
        }
        let _ = write!(
            out,
            "\n# summary\nmean,{:?}\nstd,{:?}\nci95,{:?}\n",
            self.mean, self.std, self.ci95
        );
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The evaluation episode `(run, index)`, independent of method and of which
/// worker asks for it.
pub fn evaluation_episode(
    store: &EmbeddingStore,
    split: &ClassSplit,
    config: &EvalConfig,
    run: usize,
    index: usize,
) -> Result<Episode> {
    let mut ep_rng = rng::stream(config.seed, purpose::EVAL_EPISODE, &[run as u64, index as u64]);
    let mut episode = episodic::sample_episode(store, &split.unseen, config.shape, &mut ep_rng)?;
    if config.l2_normalize {
        episode.l2_normalize();
    }
    Ok(episode)
}

/// Evaluate on `runs x episodes` episodes from the unseen classes, in
/// parallel on the current rayon pool.
pub fn evaluate(
    store: &EmbeddingStore,
    split: &ClassSplit,
    head: &ProjectionHead,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let per_episode: Vec<f64> = (0..config.runs * config.episodes)
        .into_par_iter()
        .map(|flat| {
            let (run, index) = (flat / config.episodes, flat % config.episodes);
            let episode = evaluation_episode(store, split, config, run, index)?;
            let mut gen_rng = rng::stream(config.seed, purpose::EVAL_GENERATE, &[run as u64, index as u64]);
            Ok(predict_episode(head, &episode, &config.augment, &mut gen_rng)?.accuracy)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_runs(
        per_episode.chunks(config.episodes).map(<[f64]>::to_vec).collect(),
    ))
}

/// [`evaluate`] on a dedicated pool of `jobs` workers.
pub fn evaluate_with_jobs(
    store: &EmbeddingStore,
    split: &ClassSplit,
    head: &ProjectionHead,
    config: &EvalConfig,
    jobs: usize,
) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| evaluate(store, split, head, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "WithinClassCovRepr")]
pub enum WithinClassCov {
    /// `std^2 I`
    Isotropic {
        std: f64,
    },
    /// `std^2 (I + A A^T / d) / 2` with a fresh Gaussian `A` per class.
    Random {
        std: f64,
    },
    Zero,
}

// Internally tagged enums are deserialized through a buffer that cannot hold
// arbitrary-precision numbers, so read a flat struct instead.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WithinClassCovRepr {
    kind: String,
    std: Option<f64>,
}

impl TryFrom<WithinClassCovRepr> for WithinClassCov {
    type Error = String;

    fn try_from(repr: WithinClassCovRepr) -> std::result::Result<Self, String> {
        match (repr.kind.as_str(), repr.std) {
            ("isotropic", Some(std)) => Ok(Self::Isotropic { std }),
            ("random", Some(std)) => Ok(Self::Random { std }),
            ("zero", None) => Ok(Self::Zero),
            ("isotropic" | "random", None) => Err(format!("{} needs std", repr.kind)),
            ("zero", Some(_)) => Err("zero takes no std".into()),
            (other, _) => Err(format!("unknown kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    /// Radius of the sphere the class means are drawn on.
    pub class_mean_scale: f64,
    pub within: WithinClassCov,
    pub seed: u64,
}

/// A synthetic store plus the parameters it was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticStore {
    pub store: EmbeddingStore,
    pub labels: Vec<String>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl SyntheticStore {
    pub fn truth(&self, label: &str) -> Option<(&DVector<f64>, &DMatrix<f64>)> {
        let i = self.labels.iter().position(|l| l == label)?;
        Some((&self.means[i], &self.covs[i]))
    }
}

pub fn synth_label(class: usize) -> String {
    format!("class_{class:03}")
}

/// Gaussian classes around means on a sphere of radius `class_mean_scale`.
pub fn make_synthetic(spec: &SynthSpec) -> Result<SyntheticStore> {
    if spec.dim == 0 || !spec.class_mean_scale.is_finite() || spec.class_mean_scale < 0.0 {
        return Err(Error::Config(
            "synthetic spec needs dim >= 1 and a finite, non-negative scale".into(),
        ));
    }
    let d = spec.dim;
    let mut records = Vec::with_capacity(spec.n_classes * spec.per_class_count);
    let mut labels = Vec::with_capacity(spec.n_classes);
    let mut means = Vec::with_capacity(spec.n_classes);
    let mut covs = Vec::with_capacity(spec.n_classes);
    for class in 0..spec.n_classes {
        let c = class as u64;
        let mut mean_rng = rng::stream(spec.seed, purpose::SYNTH, &[0, c]);
        let direction = loop {
            let g = DVector::from_fn(d, |_, _| mean_rng.sample::<f64, _>(StandardNormal));
            if g.norm() > 1e-12 {
                break g.normalize();
            }
        };
        let mean = direction * spec.class_mean_scale;
        let cov = match spec.within {
            WithinClassCov::Isotropic { std } => DMatrix::identity(d, d) * (std * std),
            WithinClassCov::Random { std } => {
                let mut cov_rng = rng::stream(spec.seed, purpose::SYNTH, &[1, c]);
                let a = DMatrix::from_fn(d, d, |_, _| cov_rng.sample::<f64, _>(StandardNormal));
                (DMatrix::identity(d, d) + &a * a.transpose() / d as f64) * (0.5 * std * std)
            }
            WithinClassCov::Zero => DMatrix::zeros(d, d),
        };
        let label = synth_label(class);
        let mut sample_rng = rng::stream(spec.seed, purpose::SYNTH, &[2, c]);
        let samples = if spec.within == WithinClassCov::Zero {
            vec![mean.clone(); spec.per_class_count]
        } else {
            sampler::sample_gaussian(
                &Gaussian::new(mean.clone(), cov.clone())?,
                spec.per_class_count,
                &mut sample_rng,
            )
        };
        for (i, x) in samples.into_iter().enumerate() {
            records.push(EmbeddingRecord {
                id: format!("{label}/{i}"),
                label: label.clone(),
                vector: x.as_slice().to_vec(),
            });
        }
        labels.push(label);
        means.push(mean);
        covs.push(cov);
    }
    Ok(SyntheticStore {
        store: EmbeddingStore::new(d, records)?,
        labels,
        means,
        covs,
    })
}

/// Average estimation errors against ground truth (identity head).
///
/// Mean errors are Euclidean norms, covariance errors Frobenius norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorError {
    pub support_mean: f64,
    pub way_mean: f64,
    pub shot_mean: f64,
    pub support_cov: f64,
    pub way_cov: f64,
    pub shot_cov: f64,
    /// Number of (episode, class) estimates averaged.
    pub estimates: usize,
}

/// Compare the support-only estimate with the two calibrated estimates over
/// `episodes` episodes from `classes`. With `r == 0` no neighbors are used
/// and the calibrated estimates fall back to the support statistics.
pub fn estimator_error(
    synth: &SyntheticStore,
    classes: &std::collections::BTreeSet<String>,
    shape: EpisodeShape,
    r: usize,
    episodes: usize,
    seed: u64,
) -> Result<EstimatorError> {
    let mut acc = [0.0f64; 6];
    let mut estimates = 0usize;
    for e in 0..episodes {
        let mut ep_rng = rng::stream(seed, purpose::EVAL_EPISODE, &[e as u64]);
        let episode = episodic::sample_episode(&synth.store, classes, shape, &mut ep_rng)?;
        let queries: Vec<DVector<f64>> = episode.query.iter().map(|i| i.vector.clone()).collect();
        for (class, label) in episode.way_labels.iter().enumerate() {
            let (true_mean, true_cov) = synth.truth(label).ok_or_else(|| Error::UnknownLabel(label.clone()))?;
            let supports: Vec<DVector<f64>> = episode
                .support
                .iter()
                .filter(|i| i.class == class)
                .map(|i| i.vector.clone())
                .collect();
            let k = supports.len();
            let support_mean = supports.iter().sum::<DVector<f64>>() / k as f64;
            let support_cov = if k > 1 {
                supports
                    .iter()
                    .map(|x| (x - &support_mean) * (x - &support_mean).transpose())
                    .sum::<DMatrix<f64>>()
                    / (k - 1) as f64
            } else {
                DMatrix::zeros(support_mean.len(), support_mean.len())
            };
            let (way_mean, way_cov, shot_mean, shot_cov_err) = if r == 0 {
                let err = (&support_cov - true_cov).norm();
                (support_mean.clone(), support_cov.clone(), support_mean.clone(), err)
            } else {
                let neighbors = estimator::neighbor_sets(&supports, &queries, r)?;
                let (way_mean, way_cov) = estimator::way_moments(&supports, &neighbors)?;
                let shots = supports
                    .iter()
                    .zip(&neighbors)
                    .map(|(s, n)| estimator::shot_moments(s, &n.vectors))
                    .collect::<Result<Vec<_>>>()?;
                let shot_mean = shots.iter().map(|(m, _)| m).sum::<DVector<f64>>() / k as f64;
                let shot_cov_err = shots.iter().map(|(_, c)| (c - true_cov).norm()).sum::<f64>() / k as f64;
                (way_mean, way_cov, shot_mean, shot_cov_err)
            };
            acc[0] += (&support_mean - true_mean).norm();
            acc[1] += (&way_mean - true_mean).norm();
            acc[2] += (&shot_mean - true_mean).norm();
            acc[3] += (&support_cov - true_cov).norm();
            acc[4] += (&way_cov - true_cov).norm();
            acc[5] += shot_cov_err;
            estimates += 1;
        }
    }
    let avg = |x: f64| x / estimates.max(1) as f64;
    Ok(EstimatorError {
        support_mean: avg(acc[0]),
        way_mean: avg(acc[1]),
        shot_mean: avg(acc[2]),
        support_cov: avg(acc[3]),
        way_cov: avg(acc[4]),
        shot_cov: avg(acc[5]),
        estimates,
    })
}
