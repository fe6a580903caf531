//! Gaussian factorization, sampling and support-set augmentation.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{self, ClassDistribution, CovarianceMode, Method};

/// Relative jitter levels, multiplied by `trace / d`. The first level that
/// factorizes wins.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];
/// Absolute lower bound on any non-zero jitter (covers all-zero covariances).
pub const JITTER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

/// Factor `cov + jitter * I = L L^T`, escalating jitter along
/// [`JITTER_LADDER`].
pub fn cholesky_psd(cov: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let dim = cov.nrows();
    if !cov.is_square() || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotFactorizable { jitter: 0.0 });
    }
    let scale = cov.trace() / dim.max(1) as f64;
    let mut jitter = 0.0;
    for level in JITTER_LADDER {
        jitter = if level == 0.0 {
            0.0
        } else {
            (level * scale).max(JITTER_FLOOR)
        };
        let mut shifted = cov.clone();
        for i in 0..dim {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let lower = chol.unpack();
            if lower.iter().all(|v| v.is_finite()) {
                if jitter > 0.0 {
                    log::debug!("cholesky_psd: d={dim} trace/d={scale:e} jitter={jitter:e}");
                }
                return Ok(CholeskyFactor { lower, jitter });
            }
        }
    }
    log::warn!("cholesky_psd: d={dim} not factorizable at jitter={jitter:e}");
    Err(Error::NotFactorizable { jitter })
}

/// A multivariate normal with its sampling factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::LengthMismatch {
                expected: mean.len(),
                found: cov.nrows(),
            });
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let CholeskyFactor { lower, jitter } = cholesky_psd(&cov)?;
        Ok(Self {
            mean,
            cov,
            lower,
            jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// One draw `mean + L z`, `z` standard normal.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let dim = self.dim();
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        DVector::from_fn(dim, |i, _| {
            let mut acc = 0.0;
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += self.lower[(i, j)] * zj;
            }
            self.mean[i] + acc
        })
    }
}

pub fn sample_gaussian<R: Rng + ?Sized>(g: &Gaussian, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..n).map(|_| g.draw(rng)).collect()
}

/// How shot-mode draws are spread over a class's K components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    /// `n / K` each, the first `n % K` components get one more.
    #[default]
    Even,
    /// Each draw picks a component uniformly at random.
    Random,
}

pub fn even_allocation(n: usize, components: usize) -> Vec<usize> {
    let base = n / components;
    let extra = n % components;
    (0..components).map(|i| base + usize::from(i < extra)).collect()
}

pub fn generate_for_class<R: Rng + ?Sized>(
    dist: &ClassDistribution,
    n_gen: usize,
    allocation: Allocation,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let components = &dist.components;
    match allocation {
        Allocation::Even => components
            .iter()
            .zip(even_allocation(n_gen, components.len()))
            .flat_map(|(g, count)| sample_gaussian(g, count, rng))
            .collect(),
        Allocation::Random => (0..n_gen)
            .map(|_| components[rng.random_range(0..components.len())].draw(rng))
            .collect(),
    }
}

/// Synthetic embeddings per episode class.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeneratedSet {
    pub per_class: Vec<Vec<DVector<f64>>>,
}

impl GeneratedSet {
    pub fn empty(n_classes: usize) -> Self {
        Self {
            per_class: vec![Vec::new(); n_classes],
        }
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// `(vector, class)` pairs, class-major.
    pub fn iter(&self) -> impl Iterator<Item = (&DVector<f64>, usize)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(c, vs)| vs.iter().map(move |v| (v, c)))
    }
}

/// Draw `n_gen` samples for every class, in class order, from one stream.
pub fn generate<R: Rng + ?Sized>(
    dists: &[ClassDistribution],
    n_gen: usize,
    allocation: Allocation,
    rng: &mut R,
) -> GeneratedSet {
    GeneratedSet {
        per_class: dists
            .iter()
            .map(|d| generate_for_class(d, n_gen, allocation, rng))
            .collect(),
    }
}

/// Per class: the original supports in their given order, followed by that
/// class's generated samples.
pub fn augment_support(
    support: &[(DVector<f64>, usize)],
    generated: &GeneratedSet,
) -> Result<Vec<(DVector<f64>, usize)>> {
    let n_classes = support.iter().map(|&(_, c)| c + 1).max().unwrap_or(0);
    if generated.per_class.len() != n_classes {
        return Err(Error::MissingClass {
            expected: n_classes,
            found: generated.per_class.len(),
        });
    }
    let mut combined = Vec::with_capacity(support.len() + generated.total());
    for (class, extra) in generated.per_class.iter().enumerate() {
        combined.extend(support.iter().filter(|(_, c)| *c == class).cloned());
        combined.extend(extra.iter().map(|v| (v.clone(), class)));
    }
    Ok(combined)
}

/// Everything that controls test-time (and train-time) augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub method: Method,
    pub r: usize,
    pub n_gen: usize,
    pub allocation: Allocation,
    pub cov_mode: CovarianceMode,
}

impl AugmentSettings {
    pub fn baseline() -> Self {
        Self {
            method: Method::Baseline,
            r: 0,
            n_gen: 0,
            allocation: Allocation::Even,
            cov_mode: CovarianceMode::Full,
        }
    }

    /// True when the settings cannot produce any generated sample.
    pub fn is_inert(&self) -> bool {
        self.method == Method::Baseline || self.n_gen == 0
    }
}

/// Estimate every class of an embedded episode from its supports and the
/// whole unlabeled query pool, then draw `n_gen` samples per class.
pub fn generate_for_episode<R: Rng + ?Sized>(
    support: &[(DVector<f64>, usize)],
    queries: &[DVector<f64>],
    n_classes: usize,
    settings: &AugmentSettings,
    rng: &mut R,
) -> Result<GeneratedSet> {
    let Some(strategy) = settings.method.strategy().filter(|_| settings.n_gen > 0) else {
        return Ok(GeneratedSet::empty(n_classes));
    };
    let dists = (0..n_classes)
        .map(|class| {
            let members: Vec<DVector<f64>> = support
                .iter()
                .filter(|(_, c)| *c == class)
                .map(|(v, _)| v.clone())
                .collect();
            estimator::estimate_class(strategy, &members, queries, settings.r, settings.cov_mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(generate(&dists, settings.n_gen, settings.allocation, rng))
}
