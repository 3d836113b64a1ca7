//! Spectral analysis of the selected-sample attention `Ã = A M A`.
//!
//! For `A = XᵀX` built from unit-norm columns and a 0/1 diagonal selection
//! `M`, the cosine between `vec(A)` and `vec(Ã)` can be computed three ways:
//!
//! * directly, as a dot product of the flattened matrices;
//! * through traces, `tr(AᵀÃ) / √(tr(AᵀA)·tr(ÃᵀÃ))`;
//! * spectrally, with `A = Q Λ Qᵀ` and `S = Qᵀ M Q`:
//!   `Σλ³S_ii / √(Σλ² · Σλ⁴S_ii)`.
//!
//! The first two agree to rounding. The spectral form uses only the diagonal
//! of `S`; the first two traces are exact, but `tr(ÃᵀÃ) = tr(Λ²SΛ²S)`
//! equals `Σλ⁴S_ii` only when `S` commutes with `Λ`. Reports therefore carry
//! both the diagonal form and the exact `Σ_ij λ_i²λ_j²S_ij²` form.
//!
//! With equal eigenvalues the cosine is
//! `√(m/n)`, and with a full selection it reduces to
//! `Σλ³ / √(Σλ²·Σλ⁴)`, which never exceeds one.
//!
//! The claim that adding samples to a selection never lowers the cosine is
//! checked empirically here: violations are collected, not ruled out.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, eigh_symmetric, l2_normalize_rows, matmul, matmul_nt, EigenDecomposition, Matrix};

/// Eigenvalues in `[−PSD_CLAMP, 0)` are treated as zero.
pub const PSD_CLAMP: f64 = 1e-10;

/// A decrease larger than this counts as a monotonicity violation.
pub const MONOTONICITY_SLACK: f64 = 1e-12;

/// Largest `n` for which every subset is enumerated.
pub const EXHAUSTIVE_LIMIT: usize = 12;

/// Diagonal 0/1 sample selection.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionDiag {
    flags: Vec<bool>,
}

impl SelectionDiag {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n];
        for &i in indices {
            *flags.get_mut(i).ok_or_else(|| Error::Shape(format!("selection index {i} out of range for n = {n}")))? =
                true;
        }
        Ok(Self { flags })
    }

    /// Bit `i` of `bits` selects sample `i`.
    pub fn from_bits(n: usize, bits: u64) -> Self {
        Self { flags: (0..n).map(|i| bits >> i & 1 == 1).collect() }
    }

    pub fn all(n: usize) -> Self {
        Self { flags: vec![true; n] }
    }

    pub fn none(n: usize) -> Self {
        Self { flags: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    /// Number of selected samples.
    pub fn m(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn weights(&self) -> Vec<f64> {
        self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()
    }

    pub fn is_subset_of(&self, other: &SelectionDiag) -> bool {
        self.len() == other.len() && self.flags.iter().zip(&other.flags).all(|(&a, &b)| !a || b)
    }
}

/// `A = XᵀX` for `x` of shape `d × n`, after scaling every column to unit
/// norm.
pub fn build_attention(x: &Matrix) -> Result<Matrix> {
    let columns = l2_normalize_rows(&x.transpose())?;
    let mut a = matmul_nt(&columns, &columns)?;
    // Gram matrices are symmetric by construction; copy the upper triangle so
    // the result is exactly so.
    for i in 0..a.rows() {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    Ok(a)
}

fn check_selection(a: &Matrix, sel: &SelectionDiag) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!("attention must be square, got {:?}", a.shape())));
    }
    if sel.len() != a.rows() {
        return Err(Error::Shape(format!("selection of length {} for {}x{} attention", sel.len(), a.rows(), a.cols())));
    }
    Ok(())
}

/// `Ã = A · diag(sel) · A`.
pub fn select_and_project(a: &Matrix, sel: &SelectionDiag) -> Result<Matrix> {
    check_selection(a, sel)?;
    let w = sel.weights();
    let masked = Matrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] * w[j]);
    matmul(&masked, a)
}

/// `Ã` computed the long way: `P = X·M`, `X̃ = PᵀX`, `Ã = X̃ᵀX̃`.
/// `x` is `d × n` and is used as given (no normalization).
pub fn attention_via_selected_data(x: &Matrix, sel: &SelectionDiag) -> Result<Matrix> {
    if sel.len() != x.cols() {
        return Err(Error::Shape(format!("selection of length {} for {} samples", sel.len(), x.cols())));
    }
    let w = sel.weights();
    let p = Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] * w[j]);
    let x_tilde = matmul(&p.transpose(), x)?;
    matmul(&x_tilde.transpose(), &x_tilde)
}

/// Cosine of the flattened matrices.
pub fn cosine_direct(a: &Matrix, atilde: &Matrix) -> Result<f64> {
    if a.shape() != atilde.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), atilde.shape())));
    }
    let (na, nt) = (a.frobenius_norm(), atilde.frobenius_norm());
    if na == 0.0 || nt == 0.0 {
        return Err(Error::UndefinedCosine("zero matrix".into()));
    }
    Ok(dot(a.as_slice(), atilde.as_slice()) / (na * nt))
}

/// The three traces `tr(AᵀÃ)`, `tr(AᵀA)`, `tr(ÃᵀÃ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceTriple {
    pub a_atilde: f64,
    pub a_a: f64,
    pub atilde_atilde: f64,
}

impl TraceTriple {
    pub fn cosine(&self) -> Result<f64> {
        let denom = self.a_a * self.atilde_atilde;
        if self.atilde_atilde <= 0.0 || denom <= 0.0 {
            return Err(Error::UndefinedCosine("tr(ÃᵀÃ) is zero".into()));
        }
        Ok(self.a_atilde / denom.sqrt())
    }
}

/// Traces computed from explicit matrix products.
pub fn explicit_traces(a: &Matrix, sel: &SelectionDiag) -> Result<TraceTriple> {
    let atilde = select_and_project(a, sel)?;
    let at = a.transpose();
    Ok(TraceTriple {
        a_atilde: matmul(&at, &atilde)?.trace(),
        a_a: matmul(&at, a)?.trace(),
        atilde_atilde: matmul(&atilde.transpose(), &atilde)?.trace(),
    })
}

/// Cosine through the trace quotient.
pub fn cosine_trace(a: &Matrix, sel: &SelectionDiag) -> Result<f64> {
    explicit_traces(a, sel)?.cosine()
}

/// Everything the spectral route produces for one `(A, M)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub n: usize,
    pub m: usize,
    /// Descending, after PSD clamping.
    pub eigenvalues: Vec<f64>,
    /// Diagonal of `S = Qᵀ M Q`.
    pub s_diag: Vec<f64>,
    pub traces_explicit: TraceTriple,
    /// `Σλ³S_ii`, `Σλ²`, `Σλ⁴S_ii`.
    pub traces_spectral: TraceTriple,
    /// Same, but with `tr(ÃᵀÃ) = Σ_ij λ_i²λ_j²S_ij²` from the full `S`.
    pub traces_spectral_full: TraceTriple,
    pub cos_direct: f64,
    pub cos_trace: f64,
    /// Cosine from the diagonal-only traces. `tr(ÃᵀÃ) = Σλ⁴S_ii` holds only
    /// when `S` commutes with `Λ` (full or empty selection, equal
    /// eigenvalues, selections spanning whole eigenspaces), so in general
    /// this differs from `cos_direct`.
    pub cos_spectral: f64,
    pub cos_spectral_full: f64,
    /// Eigenvalues below `−PSD_CLAMP`, which were left unclamped.
    pub negative_eigenvalues: usize,
}

impl SpectralReport {
    pub fn s_trace(&self) -> f64 {
        self.s_diag.iter().sum()
    }
}

/// Eigendecomposition of `A` reused across many selections.
#[derive(Debug, Clone)]
pub struct SpectralAnalysis {
    a: Matrix,
    eigen: EigenDecomposition,
    lambdas: Vec<f64>,
    negative: usize,
}

impl SpectralAnalysis {
    pub fn new(a: &Matrix) -> Result<Self> {
        let eigen = eigh_symmetric(a)?;
        let mut negative = 0;
        let lambdas = eigen
            .eigenvalues
            .iter()
            .map(|&l| {
                if l < -PSD_CLAMP {
                    negative += 1;
                    l
                } else {
                    l.max(0.0)
                }
            })
            .collect();
        if negative > 0 {
            warn!("attention matrix has {negative} eigenvalue(s) below -{PSD_CLAMP:e}; it is not PSD");
        }
        Ok(Self { a: a.clone(), eigen, lambdas, negative })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn decomposition(&self) -> &EigenDecomposition {
        &self.eigen
    }

    /// `S_ii = Σ_j Q_ji² m_j`.
    pub fn s_diag(&self, sel: &SelectionDiag) -> Result<Vec<f64>> {
        check_selection(&self.a, sel)?;
        let q = &self.eigen.eigenvectors;
        let n = q.rows();
        Ok((0..n).map(|i| (0..n).filter(|&j| sel.flags[j]).map(|j| q[(j, i)] * q[(j, i)]).sum()).collect())
    }

    pub fn spectral_traces(&self, s_diag: &[f64]) -> TraceTriple {
        let mut t = TraceTriple { a_atilde: 0.0, a_a: 0.0, atilde_atilde: 0.0 };
        for (&l, &s) in self.lambdas.iter().zip(s_diag) {
            let l2 = l * l;
            t.a_a += l2;
            t.a_atilde += l2 * l * s;
            t.atilde_atilde += l2 * l2 * s;
        }
        t
    }

    pub fn cosine(&self, sel: &SelectionDiag) -> Result<f64> {
        self.spectral_traces(&self.s_diag(sel)?).cosine()
    }

    /// `S = Qᵀ M Q` in full.
    pub fn s_matrix(&self, sel: &SelectionDiag) -> Result<Matrix> {
        check_selection(&self.a, sel)?;
        let q = &self.eigen.eigenvectors;
        let n = q.rows();
        Ok(Matrix::from_fn(n, n, |i, j| (0..n).filter(|&k| sel.flags[k]).map(|k| q[(k, i)] * q[(k, j)]).sum()))
    }

    /// Spectral traces with the exact `tr(Λ²SΛ²S)` term.
    pub fn spectral_traces_full(&self, s: &Matrix) -> TraceTriple {
        let mut t = self.spectral_traces(&s.diag());
        let l2: Vec<f64> = self.lambdas.iter().map(|l| l * l).collect();
        t.atilde_atilde =
            (0..s.rows()).map(|i| (0..s.cols()).map(|j| l2[i] * l2[j] * s[(i, j)] * s[(i, j)]).sum::<f64>()).sum();
        t
    }

    pub fn report(&self, sel: &SelectionDiag) -> Result<SpectralReport> {
        let s_diag = self.s_diag(sel)?;
        let traces_spectral = self.spectral_traces(&s_diag);
        let traces_spectral_full = self.spectral_traces_full(&self.s_matrix(sel)?);
        let traces_explicit = explicit_traces(&self.a, sel)?;
        let atilde = select_and_project(&self.a, sel)?;
        Ok(SpectralReport {
            n: self.a.rows(),
            m: sel.m(),
            eigenvalues: self.lambdas.clone(),
            s_diag,
            traces_explicit,
            traces_spectral,
            traces_spectral_full,
            cos_direct: cosine_direct(&self.a, &atilde)?,
            cos_trace: traces_explicit.cosine()?,
            cos_spectral: traces_spectral.cosine()?,
            cos_spectral_full: traces_spectral_full.cosine()?,
            negative_eigenvalues: self.negative,
        })
    }
}

/// Full three-route report for one selection.
pub fn cosine_spectral(a: &Matrix, sel: &SelectionDiag) -> Result<SpectralReport> {
    SpectralAnalysis::new(a)?.report(sel)
}

/// `Σλ³ / √(Σλ²·Σλ⁴)`: the cosine when every sample is selected.
pub fn full_selection_cosine(eigenvalues: &[f64]) -> Result<f64> {
    let (mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0);
    for &l in eigenvalues {
        s2 += l * l;
        s3 += l * l * l;
        s4 += l * l * l * l;
    }
    if s2 == 0.0 || s4 == 0.0 {
        return Err(Error::UndefinedCosine("all eigenvalues are zero".into()));
    }
    Ok(s3 / (s2 * s4).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainViolation {
    /// Position of the later selection in the chain.
    pub position: usize,
    pub from_m: usize,
    pub to_m: usize,
    pub decrease: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub sizes: Vec<usize>,
    pub cosines: Vec<f64>,
    pub violations: Vec<ChainViolation>,
}

/// Cosine along a nested chain of selections, with every adjacent decrease
/// larger than [`MONOTONICITY_SLACK`] listed as a violation.
pub fn nested_monotonicity_check(a: &Matrix, chain: &[SelectionDiag]) -> Result<MonotonicityReport> {
    for (pos, pair) in chain.windows(2).enumerate() {
        if !pair[0].is_subset_of(&pair[1]) {
            return Err(Error::Parameter(format!("selection {} is not contained in selection {}", pos, pos + 1)));
        }
    }
    let cosines = chain.iter().map(|sel| cosine_trace(a, sel)).collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = chain.iter().map(SelectionDiag::m).collect();
    let violations = cosines
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] - w[1] > MONOTONICITY_SLACK)
        .map(|(i, w)| ChainViolation { position: i + 1, from_m: sizes[i], to_m: sizes[i + 1], decrease: w[0] - w[1] })
        .collect();
    Ok(MonotonicityReport { sizes, cosines, violations })
}

/// One covering step `from ⊂ to` (`|to| = |from| + 1`) where the cosine drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeViolation {
    pub from: Vec<usize>,
    pub to: Vec<usize>,
    pub decrease: f64,
}

/// Monotonicity audit over all maximal nested chains (singleton to full
/// set), or over sampled chains when `n` exceeds [`EXHAUSTIVE_LIMIT`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainAudit {
    pub n: usize,
    pub exhaustive: bool,
    /// Cosine per non-empty subset, indexed by bitmask (entry 0 unused);
    /// empty when sampled.
    pub subset_cosines: Vec<f64>,
    pub chains_checked: u128,
    pub chains_with_violation: u128,
    pub violations: Vec<EdgeViolation>,
}

fn bits_to_indices(bits: u64, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| bits >> i & 1 == 1).collect()
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Audits every maximal chain for `n ≤ EXHAUSTIVE_LIMIT`; otherwise
/// checks `samples` random maximal chains drawn with `seed`.
///
/// A maximal chain has a violation exactly when one of its covering steps
/// does, so the exhaustive audit evaluates each subset once, records the
/// decreasing steps, and counts the violation-free chains by dynamic
/// programming over subsets.
pub fn audit_nested_selections(a: &Matrix, samples: usize, seed: u64) -> Result<ChainAudit> {
    let n = a.rows();
    check_selection(a, &SelectionDiag::none(n))?;
    if n > EXHAUSTIVE_LIMIT {
        return sampled_audit(a, samples, seed);
    }
    let total = 1u64 << n;
    let mut subset_cosines = vec![f64::NAN; total as usize];
    let computed: Vec<f64> = (1..total)
        .into_par_iter()
        .map(|bits| cosine_trace(a, &SelectionDiag::from_bits(n, bits)))
        .collect::<Result<_>>()?;
    subset_cosines[1..].copy_from_slice(&computed);

    let mut violations = Vec::new();
    // clean[s]: violation-free chains from a singleton up to s
    let mut clean = vec![0u128; total as usize];
    for bits in 1..total {
        if bits.count_ones() == 1 {
            clean[bits as usize] = 1;
            continue;
        }
        for j in 0..n {
            if bits >> j & 1 == 0 {
                continue;
            }
            let from = bits & !(1 << j);
            let decrease = subset_cosines[from as usize] - subset_cosines[bits as usize];
            if decrease > MONOTONICITY_SLACK {
                violations.push(EdgeViolation {
                    from: bits_to_indices(from, n),
                    to: bits_to_indices(bits, n),
                    decrease,
                });
            } else {
                clean[bits as usize] += clean[from as usize];
            }
        }
    }
    let chains = factorial(n);
    Ok(ChainAudit {
        n,
        exhaustive: true,
        subset_cosines,
        chains_checked: chains,
        chains_with_violation: chains - clean[(total - 1) as usize],
        violations,
    })
}

fn sampled_audit(a: &Matrix, samples: usize, seed: u64) -> Result<ChainAudit> {
    let n = a.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut bad_chains = 0u128;
    for _ in 0..samples {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let chain: Vec<SelectionDiag> =
            (1..=n).map(|m| SelectionDiag::from_indices(n, &order[..m])).collect::<Result<_>>()?;
        let report = nested_monotonicity_check(a, &chain)?;
        if !report.violations.is_empty() {
            bad_chains += 1;
        }
        for v in report.violations {
            let mut from = order[..v.from_m].to_vec();
            let mut to = order[..v.to_m].to_vec();
            from.sort_unstable();
            to.sort_unstable();
            violations.push(EdgeViolation { from, to, decrease: v.decrease });
        }
    }
    Ok(ChainAudit {
        n,
        exhaustive: false,
        subset_cosines: Vec::new(),
        chains_checked: samples as u128,
        chains_with_violation: bad_chains,
        violations,
    })
}

/// Tolerance for `|cos_direct − cos_trace|`.
pub const TRACE_TOLERANCE: f64 = 1e-9;
/// Tolerance for the eigenvalue routes against `cos_direct`.
pub const SPECTRAL_TOLERANCE: f64 = 1e-8;

/// Agreement of the cosine routes over a batch of selections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub selections: usize,
    pub max_trace_gap: f64,
    /// Largest `|cos_direct − cos_spectral|` (diagonal-only form).
    pub max_spectral_gap: f64,
    pub max_spectral_full_gap: f64,
    pub trace_disagreements: usize,
    pub spectral_full_disagreements: usize,
    /// Selections where the diagonal-only form misses by more than
    /// [`SPECTRAL_TOLERANCE`]. Expected for partial selections.
    pub spectral_diagonal_deviations: usize,
    pub max_s_trace_gap: f64,
    pub s_diag_out_of_range: usize,
    pub negative_eigenvalues: usize,
}

impl CrossCheck {
    /// Disagreements among the routes that are exact identities.
    pub fn disagreements(&self) -> usize {
        self.trace_disagreements + self.spectral_full_disagreements
    }
}

/// Runs every cosine route on each selection; empty selections are skipped
/// since the cosine is undefined there.
pub fn cross_check(a: &Matrix, selections: &[SelectionDiag]) -> Result<CrossCheck> {
    let analysis = SpectralAnalysis::new(a)?;
    let mut c = CrossCheck {
        selections: 0,
        max_trace_gap: 0.0,
        max_spectral_gap: 0.0,
        max_spectral_full_gap: 0.0,
        trace_disagreements: 0,
        spectral_full_disagreements: 0,
        spectral_diagonal_deviations: 0,
        max_s_trace_gap: 0.0,
        s_diag_out_of_range: 0,
        negative_eigenvalues: analysis.negative,
    };
    for sel in selections.iter().filter(|s| s.m() > 0) {
        let r = analysis.report(sel)?;
        let gaps = [
            (r.cos_direct - r.cos_trace).abs(),
            (r.cos_direct - r.cos_spectral).abs(),
            (r.cos_direct - r.cos_spectral_full).abs(),
        ];
        c.selections += 1;
        c.max_trace_gap = c.max_trace_gap.max(gaps[0]);
        c.max_spectral_gap = c.max_spectral_gap.max(gaps[1]);
        c.max_spectral_full_gap = c.max_spectral_full_gap.max(gaps[2]);
        c.trace_disagreements += usize::from(gaps[0].is_nan() || gaps[0] > TRACE_TOLERANCE);
        c.spectral_diagonal_deviations += usize::from(gaps[1].is_nan() || gaps[1] > SPECTRAL_TOLERANCE);
        c.spectral_full_disagreements += usize::from(gaps[2].is_nan() || gaps[2] > SPECTRAL_TOLERANCE);
        c.max_s_trace_gap = c.max_s_trace_gap.max((r.s_trace() - r.m as f64).abs());
        c.s_diag_out_of_range += r.s_diag.iter().filter(|&&s| !(-PSD_CLAMP..=1.0 + PSD_CLAMP).contains(&s)).count();
    }
    Ok(c)
}

/// Every non-empty selection of `n` samples, by bitmask.
pub fn all_selections(n: usize) -> Result<Vec<SelectionDiag>> {
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::Parameter(format!("exhaustive enumeration is limited to n <= {EXHAUSTIVE_LIMIT}")));
    }
    Ok((1..1u64 << n).map(|bits| SelectionDiag::from_bits(n, bits)).collect())
}

/// `count` random non-empty selections.
pub fn random_selections(n: usize, count: usize, seed: u64) -> Vec<SelectionDiag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            if flags.contains(&true) {
                break SelectionDiag::from_flags(flags);
            }
        })
        .collect()
}

/// `d × n` matrix of Gaussian columns scaled to unit norm.
pub fn random_unit_columns(d: usize, n: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    Ok(l2_normalize_rows(&x)?.transpose())
}

/// How to read the undefined `n*` in the lower bound `√((n/n*)³)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NStarReading {
    /// Numerical rank of `A` (eigenvalues above `1e-10·λ_max`).
    Rank,
    /// Number of distinct eigenvalues (relative gap `1e-9`).
    DistinctEigenvalues,
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub cos_full: f64,
    pub upper_bound_holds: bool,
    /// `tr(A) − n`; zero for unit-norm columns.
    pub trace_minus_n: f64,
    pub n_star_reading: Option<NStarReading>,
    pub n_star: Option<f64>,
    pub lower_bound: Option<f64>,
    pub lower_bound_holds: Option<bool>,
}

fn resolve_n_star(reading: NStarReading, lambdas: &[f64]) -> f64 {
    let max = lambdas.iter().cloned().fold(0.0, f64::max);
    match reading {
        NStarReading::Rank => lambdas.iter().filter(|&&l| l > 1e-10 * max).count() as f64,
        NStarReading::DistinctEigenvalues => {
            let mut distinct = 0usize;
            let mut last: Option<f64> = None;
            for &l in lambdas {
                if last.is_none_or(|p| (p - l).abs() > 1e-9 * max.max(1.0)) {
                    distinct += 1;
                    last = Some(l);
                }
            }
            distinct as f64
        }
        NStarReading::Explicit(v) => v,
    }
}

/// Full-selection cosine against its upper bound of one; the lower bound is
/// evaluated only under a caller-supplied reading of `n*`.
pub fn bound_check(a: &Matrix, n_star: Option<NStarReading>) -> Result<BoundReport> {
    let analysis = SpectralAnalysis::new(a)?;
    let cos_full = full_selection_cosine(analysis.eigenvalues())?;
    let n = a.rows();
    let resolved = n_star.map(|r| resolve_n_star(r, analysis.eigenvalues()));
    let lower_bound = resolved.map(|s| (n as f64 / s).powi(3).sqrt());
    Ok(BoundReport {
        n,
        cos_full,
        upper_bound_holds: cos_full <= 1.0 + 1e-12,
        trace_minus_n: a.trace() - n as f64,
        n_star_reading: n_star,
        n_star: resolved,
        lower_bound,
        lower_bound_holds: lower_bound.map(|lb| lb <= cos_full + 1e-12),
    })
}
