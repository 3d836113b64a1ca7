//! Pairwise affinities: the exact `q kᵀ` form and the landmark-agent
//! factorization that replaces it.
//!
//! With `l` landmark rows sampled from the input, both queries and keys are
//! mapped into an `l`-dimensional space,
//!
//! ```text
//! q̃ = q · k_lᵀ      (N × l)
//! k̃ = k · q_lᵀ      (N × l)
//! Ã = q̃ · k̃ᵀ / √d   (N × N)
//! ```
//!
//! so the `N²` term of the cost is `N²·l` instead of `N²·d`. When the
//! projections are the identity, `Ã = A M A` where `M` selects the landmark
//! rows; see [`crate::spectral`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_counted, matmul_nt_counted, MacCounter, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Identity,
    Provided,
    Random { seed: u64 },
}

/// Query, key and value projections, all `d × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
    mode: ProjectionMode,
}

impl ProjectionSet {
    pub fn identity(d: usize) -> Self {
        let eye = Matrix::identity(d);
        Self { w_q: eye.clone(), w_k: eye.clone(), w_v: eye, mode: ProjectionMode::Identity }
    }

    pub fn provided(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_q.rows();
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if w.shape() != (d, d) {
                return Err(Error::Shape(format!("{name} is {:?}, expected {d}x{d}", w.shape())));
            }
        }
        Ok(Self { w_q, w_k, w_v, mode: ProjectionMode::Provided })
    }

    /// Gaussian entries with variance `1/d`, deterministic in `seed`.
    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std-dev");
        let mut draw = || Matrix::from_fn(d, d, |_, _| normal.sample(&mut rng));
        let (w_q, w_k, w_v) = (draw(), draw(), draw());
        Self { w_q, w_k, w_v, mode: ProjectionMode::Random { seed } }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn w_v(&self) -> &Matrix {
        &self.w_v
    }
}

/// Distinct row indices used as landmark agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl LandmarkSet {
    /// Explicit landmark rows; checked against `n`.
    pub fn from_indices(indices: Vec<usize>, n: usize) -> Result<Self> {
        let set = Self { indices, seed: 0 };
        set.validate(n)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.indices.is_empty() || self.indices.len() > n {
            return Err(Error::Shape(format!("{} landmarks for {n} rows", self.indices.len())));
        }
        let mut seen = vec![false; n];
        for &i in &self.indices {
            if i >= n {
                return Err(Error::Shape(format!("landmark index {i} out of range for {n} rows")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Shape(format!("duplicate landmark index {i}")));
            }
        }
        Ok(())
    }
}

/// Samples `l` distinct indices uniformly from `0..n`, sorted ascending.
pub fn sample_landmarks(n: usize, l: usize, seed: u64) -> Result<LandmarkSet> {
    if l == 0 || l > n {
        return Err(Error::Parameter(format!("cannot sample {l} landmarks from {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, l).into_vec();
    indices.sort_unstable();
    Ok(LandmarkSet { indices, seed })
}

/// Divisor applied to the final affinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityScale {
    Off,
    /// `1/√d`, with `d` the feature dimension.
    #[default]
    SqrtDim,
    /// `1/√l`, with `l` the landmark count (falls back to `√d` for dense
    /// affinities).
    SqrtLandmarks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityKind {
    Dense,
    Laa { l: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Matrix,
    pub kind: AffinityKind,
    pub scale: AffinityScale,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

/// `(z·w_q, z·w_k, z·w_v)`.
pub fn project_qkv(z: &Matrix, p: &ProjectionSet) -> Result<(Matrix, Matrix, Matrix)> {
    project_qkv_counted(z, p, &MacCounter::new())
}

pub fn project_qkv_counted(z: &Matrix, p: &ProjectionSet, counter: &MacCounter) -> Result<(Matrix, Matrix, Matrix)> {
    if z.cols() != p.dim() {
        return Err(Error::Shape(format!("features have {} columns, projections expect {}", z.cols(), p.dim())));
    }
    if p.mode == ProjectionMode::Identity {
        return Ok((z.clone(), z.clone(), z.clone()));
    }
    Ok((matmul_counted(z, &p.w_q, counter)?, matmul_counted(z, &p.w_k, counter)?, matmul_counted(z, &p.w_v, counter)?))
}

fn check_qk(q: &Matrix, k: &Matrix) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::Shape(format!("q is {:?} but k is {:?}", q.shape(), k.shape())));
    }
    Ok(())
}

fn divisor(scale: AffinityScale, d: usize, l: Option<usize>) -> f64 {
    match scale {
        AffinityScale::Off => 1.0,
        AffinityScale::SqrtDim => (d as f64).sqrt(),
        AffinityScale::SqrtLandmarks => (l.unwrap_or(d) as f64).sqrt(),
    }
}

/// Exact affinity `A_ij = q_i · k_j` (divided per `scale`).
pub fn affinity_dense(q: &Matrix, k: &Matrix, scale: AffinityScale) -> Result<AffinityMatrix> {
    affinity_dense_counted(q, k, scale, &MacCounter::new())
}

pub fn affinity_dense_counted(
    q: &Matrix,
    k: &Matrix,
    scale: AffinityScale,
    counter: &MacCounter,
) -> Result<AffinityMatrix> {
    check_qk(q, k)?;
    let raw = matmul_nt_counted(q, k, counter)?;
    let div = divisor(scale, q.cols(), None);
    let values = if div == 1.0 { raw } else { raw.scaled(1.0 / div) };
    Ok(AffinityMatrix { values, kind: AffinityKind::Dense, scale })
}

/// Landmark-agent affinity. Only the two `N × l` factors and the output are
/// materialized.
pub fn affinity_laa(q: &Matrix, k: &Matrix, landmarks: &LandmarkSet, scale: AffinityScale) -> Result<AffinityMatrix> {
    affinity_laa_counted(q, k, landmarks, scale, &MacCounter::new())
}

pub fn affinity_laa_counted(
    q: &Matrix,
    k: &Matrix,
    landmarks: &LandmarkSet,
    scale: AffinityScale,
    counter: &MacCounter,
) -> Result<AffinityMatrix> {
    check_qk(q, k)?;
    landmarks.validate(q.rows())?;
    let q_l = q.select_rows(&landmarks.indices)?;
    let k_l = k.select_rows(&landmarks.indices)?;
    let q_tilde = matmul_nt_counted(q, &k_l, counter)?;
    let k_tilde = matmul_nt_counted(k, &q_l, counter)?;
    let raw = matmul_nt_counted(&q_tilde, &k_tilde, counter)?;
    let l = landmarks.len();
    let div = divisor(scale, q.cols(), Some(l));
    let values = if div == 1.0 { raw } else { raw.scaled(1.0 / div) };
    Ok(AffinityMatrix { values, kind: AffinityKind::Laa { l }, scale })
}

/// Cosine between the flattened matrices; used to track how closely `Ã`
/// follows `A`.
pub fn matrix_cosine(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let dot = crate::linalg::dot(a.as_slice(), b.as_slice());
    let norms = a.frobenius_norm() * b.frobenius_norm();
    if norms == 0.0 {
        return Err(Error::UndefinedCosine("zero matrix".into()));
    }
    Ok((dot / norms).clamp(-1.0, 1.0))
}
