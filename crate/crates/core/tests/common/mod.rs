//! Independent reference implementation on plain `Vec<f64>`.
//!
//! Nothing here calls the estimator, sampler, prototype or trainer code of the
//! crate. The only shared pieces are episode sampling and the seeded random
//! streams, so that both sides see the same episodes and the same normals.
#![allow(dead_code, clippy::needless_range_loop)]

use fewshot_de::episodic::Episode;
use fewshot_de::rng::Stream;
use rand::Rng;
use rand_distr::StandardNormal;

pub type Vector = Vec<f64>;
pub type Matrix = Vec<Vec<f64>>;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

pub fn mean(vs: &[&[f64]]) -> Vector {
    let d = vs[0].len();
    let mut out = vec![0.0; d];
    for v in vs {
        for i in 0..d {
            out[i] += v[i];
        }
    }
    for x in &mut out {
        *x /= vs.len() as f64;
    }
    out
}

/// `sum (v - c)(v - c)^T / (n - 1)`; zero when fewer than two vectors.
pub fn scatter(vs: &[&[f64]], center: &[f64]) -> Matrix {
    let d = center.len();
    let mut out = vec![vec![0.0; d]; d];
    if vs.len() < 2 {
        return out;
    }
    for v in vs {
        for i in 0..d {
            for j in 0..d {
                out[i][j] += (v[i] - center[i]) * (v[j] - center[j]);
            }
        }
    }
    let denom = (vs.len() - 1) as f64;
    for row in &mut out {
        for x in row {
            *x /= denom;
        }
    }
    out
}

/// Indices of the `r` queries nearest to `x`, by exhaustive search; ties go
/// to the earlier query.
pub fn nearest(x: &[f64], queries: &[Vector], r: usize) -> Vec<usize> {
    let mut taken = vec![false; queries.len()];
    let mut out = Vec::new();
    while out.len() < r.min(queries.len()) {
        let mut best: Option<(f64, usize)> = None;
        for (i, q) in queries.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist = sq_dist(x, q);
            if best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, i));
            }
        }
        let (_, i) = best.unwrap();
        taken[i] = true;
        out.push(i);
    }
    out
}

/// Way estimate: `mean = (mu_s + mu_q) / 2`, `cov = (Sigma_s + Sigma_q) / 2`,
/// each covariance divided by its own `count - 1`.
pub fn way_estimate(supports: &[Vector], queries: &[Vector], r: usize) -> (Vector, Matrix) {
    let s: Vec<&[f64]> = supports.iter().map(Vec::as_slice).collect();
    let mut pooled: Vec<&[f64]> = Vec::new();
    for x in supports {
        for i in nearest(x, queries, r) {
            pooled.push(&queries[i]);
        }
    }
    let mu_s = mean(&s);
    let mu_q = mean(&pooled);
    let sigma_s = scatter(&s, &mu_s);
    let sigma_q = scatter(&pooled, &mu_q);
    let d = mu_s.len();
    let m = (0..d).map(|i| 0.5 * (mu_s[i] + mu_q[i])).collect();
    let c = (0..d)
        .map(|i| (0..d).map(|j| 0.5 * (sigma_s[i][j] + sigma_q[i][j])).collect())
        .collect();
    (m, c)
}

/// Shot estimate for one support: mean halfway between the support and its
/// neighbor mean; covariance of the neighbors around that blended mean.
pub fn shot_estimate(x: &[f64], queries: &[Vector], r: usize) -> (Vector, Matrix) {
    let hood: Vec<&[f64]> = nearest(x, queries, r)
        .into_iter()
        .map(|i| queries[i].as_slice())
        .collect();
    let mu_n = mean(&hood);
    let m: Vector = (0..x.len()).map(|i| 0.5 * (x[i] + mu_n[i])).collect();
    let c = scatter(&hood, &m);
    (m, c)
}

/// Cholesky-Banachiewicz; `None` when a pivot is not positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Cholesky with diagonal jitter escalating over
/// `{0, 1e-10, 1e-8, 1e-6, 1e-4} * trace / d`, floored at `1e-12`.
pub fn cholesky_jittered(a: &Matrix) -> Option<(Matrix, f64)> {
    let n = a.len();
    let scale = (0..n).map(|i| a[i][i]).sum::<f64>() / n as f64;
    for level in [0.0, 1e-10, 1e-8, 1e-6, 1e-4] {
        let jitter = if level == 0.0 {
            0.0
        } else {
            f64::max(level * scale, 1e-12)
        };
        let mut shifted = a.clone();
        for (i, row) in shifted.iter_mut().enumerate() {
            row[i] += jitter;
        }
        if let Some(l) = cholesky(&shifted) {
            return Some((l, jitter));
        }
    }
    None
}

pub fn draw(m: &[f64], l: &Matrix, rng: &mut Stream) -> Vector {
    let z: Vec<f64> = (0..m.len()).map(|_| rng.sample(StandardNormal)).collect();
    (0..m.len())
        .map(|i| m[i] + (0..=i).map(|j| l[i][j] * z[j]).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Calibration {
    None,
    Way,
    Shot,
}

/// Test-time pipeline on raw vectors (identity head): estimate, sample
/// `n_gen` per class, classify every query by its nearest prototype.
/// Returns the predicted class of every query.
pub fn predict(episode: &Episode, calibration: Calibration, r: usize, n_gen: usize, rng: &mut Stream) -> Vec<usize> {
    let n = episode.n_way();
    let queries: Vec<Vector> = episode.query.iter().map(|i| i.vector.as_slice().to_vec()).collect();
    let mut members: Vec<Vec<Vector>> = vec![Vec::new(); n];
    for item in &episode.support {
        members[item.class].push(item.vector.as_slice().to_vec());
    }
    if calibration != Calibration::None && n_gen > 0 {
        let mut generated = Vec::with_capacity(n);
        for supports in &members {
            let components: Vec<(Vector, Matrix)> = match calibration {
                Calibration::Way => vec![way_estimate(supports, &queries, r)],
                Calibration::Shot => supports.iter().map(|x| shot_estimate(x, &queries, r)).collect(),
                Calibration::None => unreachable!(),
            };
            let k = components.len();
            let mut drawn = Vec::new();
            for (c, (m, cov)) in components.iter().enumerate() {
                let count = n_gen / k + usize::from(c < n_gen % k);
                let (l, _) = cholesky_jittered(cov).expect("factorizable");
                for _ in 0..count {
                    drawn.push(draw(m, &l, rng));
                }
            }
            generated.push(drawn);
        }
        for (class, drawn) in generated.into_iter().enumerate() {
            members[class].extend(drawn);
        }
    }
    let protos: Vec<Vector> = members
        .iter()
        .map(|vs| mean(&vs.iter().map(Vec::as_slice).collect::<Vec<_>>()))
        .collect();
    queries
        .iter()
        .map(|q| {
            let mut best = 0;
            for c in 1..n {
                if sq_dist(q, &protos[c]) < sq_dist(q, &protos[best]) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / predicted.len() as f64
}

/// Plain linear head: `w` is `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Matrix,
    pub b: Vector,
}

impl Head {
    pub fn project(&self, x: &[f64]) -> Vector {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, bi)| {
                let mut acc = 0.0;
                for j in 0..x.len() {
                    acc += row[j] * x[j];
                }
                acc + bi
            })
            .collect()
    }
}

/// One plain prototypical-network SGD step (no generated samples, no weight
/// decay). Returns the episode loss before the update.
pub fn sgd_step(head: &mut Head, episode: &Episode, lr: f64) -> f64 {
    let n = episode.n_way();
    let (d_out, d_in) = (head.w.len(), head.w[0].len());
    let support: Vec<(Vector, usize)> = episode
        .support
        .iter()
        .map(|i| (head.project(i.vector.as_slice()), i.class))
        .collect();
    let query: Vec<(Vector, usize)> = episode
        .query
        .iter()
        .map(|i| (head.project(i.vector.as_slice()), i.class))
        .collect();

    let mut sizes = vec![0usize; n];
    let mut protos = vec![vec![0.0; d_out]; n];
    for (e, c) in &support {
        sizes[*c] += 1;
        for i in 0..d_out {
            protos[*c][i] += e[i];
        }
    }
    for (c, p) in protos.iter_mut().enumerate() {
        for x in p {
            *x /= sizes[c] as f64;
        }
    }

    let nq = query.len() as f64;
    let mut loss = 0.0;
    let mut g_query = Vec::new();
    let mut g_proto = vec![vec![0.0; d_out]; n];
    for (e, y) in &query {
        let z: Vec<f64> = protos.iter().map(|p| -sq_dist(e, p)).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let mut s = 0.0;
        for v in &exps {
            s += v;
        }
        loss += -((z[*y] - m) - s.ln());
        let mut g = vec![0.0; d_out];
        for c in 0..n {
            let target = if c == *y { 1.0 } else { 0.0 };
            let delta = (exps[c] / s - target) / nq;
            for i in 0..d_out {
                let diff = e[i] - protos[c][i];
                g[i] += (-2.0 * delta) * diff;
                g_proto[c][i] += (2.0 * delta) * diff;
            }
        }
        g_query.push(g);
    }

    let mut gw = vec![vec![0.0; d_in]; d_out];
    let mut gb = vec![0.0; d_out];
    let inputs = episode.support.iter().chain(&episode.query);
    let grads = episode
        .support
        .iter()
        .map(|i| {
            g_proto[i.class]
                .iter()
                .map(|g| g / sizes[i.class] as f64)
                .collect::<Vector>()
        })
        .chain(g_query);
    for (item, g) in inputs.zip(grads) {
        let x = item.vector.as_slice();
        for i in 0..d_out {
            for j in 0..d_in {
                gw[i][j] += g[i] * x[j];
            }
            gb[i] += g[i];
        }
    }
    for i in 0..d_out {
        for j in 0..d_in {
            head.w[i][j] -= lr * gw[i][j];
        }
        head.b[i] -= lr * gb[i];
    }
    loss / nq
}
