//! Query-calibrated Gaussian estimation of class distributions.
//!
//! Each support is paired with its R nearest (unlabeled) queries. The
//! way-based strategy fits one Gaussian per class from the supports and all of
//! their neighbors; the shot-based strategy fits one Gaussian per support from
//! that support and its own neighbors. Both blend support and neighbor
//! statistics half and half, so their means coincide once the shot means are
//! averaged.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocore::sq_dist;
use crate::sampler::Gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Way,
    Shot,
}

/// Per-episode treatment: plain prototypes, or augmentation with samples from
/// one of the two estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "none")]
    Baseline,
    Way,
    Shot,
}

impl Method {
    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Method::Baseline => None,
            Method::Way => Some(Strategy::Way),
            Method::Shot => Some(Strategy::Shot),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "none",
            Method::Way => "way",
            Method::Shot => "shot",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(Method::Baseline),
            "way" => Ok(Method::Way),
            "shot" => Ok(Method::Shot),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Full,
    /// Off-diagonal entries zeroed after estimation.
    Diagonal,
}

/// Nearest queries of one support, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    /// Positions in the query list.
    pub indices: Vec<usize>,
    pub vectors: Vec<DVector<f64>>,
    /// Set when fewer than the requested R queries were available.
    pub truncated: bool,
}

impl Neighbors {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Per-support neighbor lists of one class.
pub type NeighborSet = Vec<Neighbors>;

/// The `r` queries closest to `support`. Ties are broken by query position.
/// Asking for more neighbors than there are queries truncates and flags.
pub fn top_r_neighbors(support: &DVector<f64>, queries: &[DVector<f64>], r: usize) -> Neighbors {
    let mut ranked: Vec<(f64, usize)> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| (sq_dist(support, q), i))
        .collect();
    // (distance, index) order is total for finite distances
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let take = r.min(ranked.len());
    let indices: Vec<usize> = ranked[..take].iter().map(|&(_, i)| i).collect();
    Neighbors {
        vectors: indices.iter().map(|&i| queries[i].clone()).collect(),
        indices,
        truncated: take < r,
    }
}

fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a DVector<f64>>, dim: usize) -> (DVector<f64>, usize) {
    let mut sum = DVector::zeros(dim);
    let mut count = 0;
    for v in vectors {
        sum += v;
        count += 1;
    }
    (sum / count.max(1) as f64, count)
}

/// `sum (v - center)(v - center)^T / (count - 1)`, or the zero matrix when
/// `count <= 1`.
fn scatter<'a>(
    vectors: impl IntoIterator<Item = &'a DVector<f64>>,
    center: &DVector<f64>,
    count: usize,
) -> DMatrix<f64> {
    let dim = center.len();
    let mut acc = DMatrix::zeros(dim, dim);
    if count <= 1 {
        return acc;
    }
    for v in vectors {
        let dev = v - center;
        acc.ger(1.0, &dev, &dev, 1.0);
    }
    acc / (count - 1) as f64
}

fn check_dims<'a>(dim: usize, vectors: impl IntoIterator<Item = &'a DVector<f64>>) -> Result<()> {
    for v in vectors {
        if v.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                found: v.len(),
            });
        }
    }
    Ok(())
}

/// Mean and covariance of the way-based estimate, before factorization.
pub fn way_moments(supports: &[DVector<f64>], neighbors: &[Neighbors]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = supports.first().ok_or(Error::EmptySupport)?.len();
    let all_neighbors = || neighbors.iter().flat_map(|n| n.vectors.iter());
    check_dims(dim, supports.iter().chain(all_neighbors()))?;

    let (support_mean, k) = mean_of(supports, dim);
    let (neighbor_mean, kr) = mean_of(all_neighbors(), dim);
    if kr == 0 {
        return Err(Error::EmptyNeighbors);
    }
    let mean = (&support_mean + &neighbor_mean) * 0.5;
    let support_cov = scatter(supports, &support_mean, k);
    let neighbor_cov = scatter(all_neighbors(), &neighbor_mean, kr);
    Ok((mean, (support_cov + neighbor_cov) * 0.5))
}

/// Mean and covariance of one shot-based component, before factorization.
pub fn shot_moments(support: &DVector<f64>, neighbors: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighbors);
    }
    let dim = support.len();
    check_dims(dim, neighbors)?;
    let (neighbor_mean, r) = mean_of(neighbors, dim);
    let mean = (support + neighbor_mean) * 0.5;
    // deviations are taken from the blended mean, not the neighbor mean
    let cov = scatter(neighbors, &mean, r);
    Ok((mean, cov))
}

pub fn estimate_way(supports: &[DVector<f64>], neighbors: &[Neighbors]) -> Result<Gaussian> {
    let (mean, cov) = way_moments(supports, neighbors)?;
    Gaussian::new(mean, cov)
}

pub fn estimate_shot(support: &DVector<f64>, neighbors: &[DVector<f64>]) -> Result<Gaussian> {
    let (mean, cov) = shot_moments(support, neighbors)?;
    Gaussian::new(mean, cov)
}

/// Estimated distribution of one class: one Gaussian (way) or one per
/// support (shot).
#[derive(Debug, Clone)]
pub struct ClassDistribution {
    pub strategy: Strategy,
    pub components: Vec<Gaussian>,
}

impl ClassDistribution {
    /// Equal-weight average of the component means.
    pub fn mean(&self) -> DVector<f64> {
        let dim = self.components[0].mean.len();
        mean_of(self.components.iter().map(|g| &g.mean), dim).0
    }
}

/// Neighbor sets for every support of a class.
pub fn neighbor_sets(supports: &[DVector<f64>], queries: &[DVector<f64>], r: usize) -> Result<NeighborSet> {
    if queries.is_empty() || r == 0 {
        return Err(Error::EmptyNeighbors);
    }
    Ok(supports.iter().map(|s| top_r_neighbors(s, queries, r)).collect())
}

pub fn estimate_class(
    strategy: Strategy,
    supports: &[DVector<f64>],
    queries: &[DVector<f64>],
    r: usize,
    mode: CovarianceMode,
) -> Result<ClassDistribution> {
    if supports.is_empty() {
        return Err(Error::EmptySupport);
    }
    let neighbors = neighbor_sets(supports, queries, r)?;
    let moments = match strategy {
        Strategy::Way => vec![way_moments(supports, &neighbors)?],
        Strategy::Shot => supports
            .iter()
            .zip(&neighbors)
            .map(|(s, n)| shot_moments(s, &n.vectors))
            .collect::<Result<_>>()?,
    };
    let components = moments
        .into_iter()
        .map(|(mean, mut cov)| {
            if mode == CovarianceMode::Diagonal {
                cov = DMatrix::from_diagonal(&cov.diagonal());
            }
            Gaussian::new(mean, cov)
        })
        .collect::<Result<_>>()?;
    Ok(ClassDistribution { strategy, components })
}
