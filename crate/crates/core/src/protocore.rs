//! Projection head, prototypes and distance-softmax classification.
//!
//! The hot loops here are written out by hand rather than delegated to
//! nalgebra's BLAS-style kernels so that the floating-point accumulation order
//! is fixed and documented: dot products and sums run in ascending index order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Log-probability floor used by every cross-entropy term.
pub const PROB_FLOOR: f64 = 1e-300;

/// Affine map `x -> W x + b` applied on top of frozen input embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ProjectionHead {
    pub fn new(w: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::LengthMismatch {
                expected: w.nrows(),
                found: b.len(),
            });
        }
        if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite head parameter".into()));
        }
        Ok(Self { w, b })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            w: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
        }
    }

    /// Identity-like start: a (rectangular) identity when `d_out >= d_in`,
    /// otherwise random orthonormal rows.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = if d_out >= d_in {
            DMatrix::identity(d_out, d_in)
        } else {
            let gaussian = DMatrix::from_fn(d_in, d_out, |_, _| rng.sample::<f64, _>(StandardNormal));
            gaussian.qr().q().transpose()
        };
        Self {
            w,
            b: DVector::zeros(d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Parameter `i` in checkpoint order: W row-major, then b.
    pub fn param(&self, i: usize) -> f64 {
        let (rows, cols) = self.w.shape();
        if i < rows * cols {
            self.w[(i / cols, i % cols)]
        } else {
            self.b[i - rows * cols]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let (rows, cols) = self.w.shape();
        if i < rows * cols {
            &mut self.w[(i / cols, i % cols)]
        } else {
            &mut self.b[i - rows * cols]
        }
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::LengthMismatch {
                expected: self.d_in(),
                found: x.len(),
            });
        }
        Ok(self.project_unchecked(x))
    }

    pub(crate) fn project_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        let (rows, cols) = self.w.shape();
        DVector::from_fn(rows, |i, _| {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += self.w[(i, j)] * x[j];
            }
            acc + self.b[i]
        })
    }

    /// Header `{"d_in":..,"d_out":..}`, then one line per row of W, then b.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = format!("{{\"d_in\":{},\"d_out\":{}}}\n", self.d_in(), self.d_out());
        let mut push_row = |row: &mut dyn Iterator<Item = f64>| {
            let line: Vec<String> = row.map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        };
        for i in 0..self.d_out() {
            push_row(&mut self.w.row(i).iter().copied());
        }
        push_row(&mut self.b.iter().copied());
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_owned());
        let mut lines = text.lines();
        let header: serde_json::Value = lines
            .next()
            .and_then(|l| serde_json::from_str(l).ok())
            .ok_or_else(|| bad("missing header"))?;
        let dim = |key: &str| {
            header
                .get(key)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| bad("header needs d_in and d_out"))
        };
        let (d_in, d_out) = (dim("d_in")?, dim("d_out")?);
        let mut parse_row = |len: usize| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad("truncated checkpoint"))?;
            let row = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("unparseable number"))?;
            if row.len() != len {
                return Err(bad("row has wrong length"));
            }
            Ok(row)
        };
        let mut w_rows = Vec::with_capacity(d_in * d_out);
        for _ in 0..d_out {
            w_rows.extend(parse_row(d_in)?);
        }
        let b = parse_row(d_out)?;
        Self::new(DMatrix::from_row_slice(d_out, d_in, &w_rows), DVector::from_vec(b))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

pub fn project(head: &ProjectionHead, x: &DVector<f64>) -> Result<DVector<f64>> {
    head.project(x)
}

/// Squared Euclidean distance, accumulated in index order.
pub fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// One mean vector per episode class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes(pub Vec<DVector<f64>>);

impl Prototypes {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> &DVector<f64> {
        &self.0[class]
    }
}

/// Per-class means of `members`. Members are summed in iteration order and the
/// sum divided by the member count.
pub fn compute_prototypes<'a, I>(members: I, n: usize) -> Result<Prototypes>
where
    I: IntoIterator<Item = (&'a DVector<f64>, usize)>,
{
    let mut sums: Vec<Option<DVector<f64>>> = vec![None; n];
    let mut counts = vec![0usize; n];
    for (vector, class) in members {
        if class >= n {
            return Err(Error::EmptyClass(class));
        }
        match &mut sums[class] {
            Some(sum) => {
                if sum.len() != vector.len() {
                    return Err(Error::LengthMismatch {
                        expected: sum.len(),
                        found: vector.len(),
                    });
                }
                for i in 0..sum.len() {
                    sum[i] += vector[i];
                }
            }
            slot @ None => *slot = Some(vector.clone()),
        }
        counts[class] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(class, (sum, count))| {
            let sum = sum.ok_or(Error::EmptyClass(class))?;
            Ok(sum / count as f64)
        })
        .collect::<Result<Vec<_>>>()
        .map(Prototypes)
}

/// Logits `-||x - P^c||^2` for every prototype.
pub fn logits(query: &DVector<f64>, protos: &Prototypes) -> Vec<f64> {
    protos.0.iter().map(|p| -sq_dist(query, p)).collect()
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &z in logits {
        sum += (z - max).exp();
    }
    let log_sum = sum.ln();
    logits.iter().map(|&z| (z - max) - log_sum).collect()
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut sum = 0.0;
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities for one embedded query.
pub fn classify(query: &DVector<f64>, protos: &Prototypes) -> Vec<f64> {
    softmax(&logits(query, protos))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean negative log-likelihood of the true class, with probabilities floored
/// at [`PROB_FLOOR`]. Empty input gives 0.
pub fn basic_loss(prob_rows: &[Vec<f64>], true_idx: &[usize]) -> f64 {
    if prob_rows.is_empty() {
        return 0.0;
    }
    let total: f64 = prob_rows
        .iter()
        .zip(true_idx)
        .map(|(row, &y)| -row[y].max(PROB_FLOOR).ln())
        .sum();
    total / prob_rows.len() as f64
}
