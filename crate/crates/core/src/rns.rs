//! Reciprocal-neighbor sparse attention.
//!
//! A row keeps column `j` only when `j` is among its top-`k` affinities *and*
//! the row is among `j`'s top-`k`. The softmax is then taken over that
//! support alone, and aggregation touches only the kept columns, so the cost
//! is `O(N·k·d)` rather than `O(N²·d)`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laa::AffinityMatrix;
use crate::linalg::{matmul_counted, topk_indices, MacCounter, Matrix};

/// Boolean `N × N` mask stored as sorted column lists per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMask {
    n: usize,
    k: usize,
    rows: Vec<Vec<usize>>,
}

impl NeighborMask {
    /// Builds a mask from explicit rows; each row is sorted and deduplicated.
    pub fn from_rows(n: usize, k: usize, mut rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::Shape(format!("{} mask rows for n = {n}", rows.len())));
        }
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&j| j >= n) {
                return Err(Error::Shape(format!("mask column out of range for n = {n}")));
            }
        }
        Ok(Self { n, k, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows.iter().enumerate().all(|(i, row)| row.iter().all(|&j| self.contains(j, i)))
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        let mut out = vec![vec![false; self.n]; self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                out[i][j] = true;
            }
        }
        out
    }
}

/// Row `i` of the result is true at the `k` largest affinities of row `i`.
///
/// With `include_self`, the diagonal is always kept and counts toward `k`;
/// the remaining `k − 1` slots go to the largest off-diagonal entries.
pub fn topk_mask(a: &AffinityMatrix, k: usize, include_self: bool) -> Result<NeighborMask> {
    let n = a.n();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} outside 1..={n}")));
    }
    let rows = (0..n)
        .map(|i| {
            let row = a.row(i);
            if !include_self {
                return topk_indices(row, k);
            }
            if k == 1 {
                return Ok(vec![i]);
            }
            let others: Vec<f64> = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).collect();
            let mut picked: Vec<usize> =
                topk_indices(&others, k - 1)?.into_iter().map(|j| if j >= i { j + 1 } else { j }).collect();
            picked.push(i);
            picked.sort_unstable();
            Ok(picked)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NeighborMask { n, k, rows })
}

/// `M = Mᵏ ∘ (Mᵏ)ᵀ`.
pub fn reciprocal_mask(mk: &NeighborMask) -> NeighborMask {
    let rows = mk
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().copied().filter(|&j| mk.contains(j, i)).collect())
        .collect();
    NeighborMask { n: mk.n, k: mk.k, rows }
}

/// Drops every entry linking two distinct query rows. Self entries stay.
pub fn isolate_queries(mask: &NeighborMask, is_query: &[bool]) -> Result<NeighborMask> {
    if is_query.len() != mask.n {
        return Err(Error::Shape(format!("{} query flags for n = {}", is_query.len(), mask.n)));
    }
    let rows = mask
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().copied().filter(|&j| i == j || !(is_query[i] && is_query[j])).collect())
        .collect();
    Ok(NeighborMask { n: mask.n, k: mask.k, rows })
}

/// Sign applied to affinities inside the exponential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxSign {
    /// `exp(+Ã)`: larger affinity, larger weight.
    #[default]
    Positive,
    /// `exp(−Ã)`, as the formula is printed.
    Negative,
}

impl SoftmaxSign {
    pub fn factor(self) -> f64 {
        match self {
            SoftmaxSign::Positive => 1.0,
            SoftmaxSign::Negative => -1.0,
        }
    }
}

/// Row-stochastic sparse attention; columns strictly increasing per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAttention {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseAttention {
    /// Each row attends only to itself.
    pub fn identity(n: usize) -> Self {
        Self { n, rows: (0..n).map(|i| vec![(i, 1.0)]).collect() }
    }

    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::Shape(format!("{} attention rows for n = {n}", rows.len())));
        }
        for row in &rows {
            if row.windows(2).any(|w| w[0].0 >= w[1].0) || row.iter().any(|&(j, _)| j >= n) {
                return Err(Error::Shape("attention columns must be increasing and < n".into()));
            }
        }
        Ok(Self { n, rows })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[(i, j)] = w;
            }
        }
        out
    }
}

/// Softmax of `sign · Ã` restricted to each row's mask support, with per-row
/// max subtraction. A row with empty support falls back to weight 1 on
/// itself.
pub fn rns_weights(a: &AffinityMatrix, m: &NeighborMask, sign: SoftmaxSign) -> Result<SparseAttention> {
    if a.n() != m.n {
        return Err(Error::Shape(format!("affinity is {}x{} but mask has n = {}", a.n(), a.n(), m.n)));
    }
    let s = sign.factor();
    let rows = m
        .rows
        .iter()
        .enumerate()
        .map(|(i, support)| {
            if support.is_empty() {
                warn!("row {i} has no reciprocal neighbors; attending to self");
                return vec![(i, 1.0)];
            }
            let row = a.row(i);
            let max = support.iter().map(|&j| s * row[j]).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = support.iter().map(|&j| (s * row[j] - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            support.iter().zip(exps).map(|(&j, e)| (j, e / total)).collect()
        })
        .collect();
    Ok(SparseAttention { n: m.n, rows })
}

/// `u_i = Σ_j w_ij v_j` over the sparse support only.
pub fn aggregate_sparse(att: &SparseAttention, v: &Matrix) -> Result<Matrix> {
    aggregate_sparse_counted(att, v, &MacCounter::new())
}

pub fn aggregate_sparse_counted(att: &SparseAttention, v: &Matrix, counter: &MacCounter) -> Result<Matrix> {
    if att.n != v.rows() {
        return Err(Error::Shape(format!("attention over {} rows, values have {}", att.n, v.rows())));
    }
    let d = v.cols();
    let mut out = Matrix::zeros(att.n, d);
    for (i, row) in att.rows.iter().enumerate() {
        let out_row = out.row_mut(i);
        for &(j, w) in row {
            for (o, &x) in out_row.iter_mut().zip(v.row(j)) {
                *o += w * x;
            }
        }
    }
    counter.add((att.nnz() * d) as u64);
    Ok(out)
}

/// Plain `weights · v`.
pub fn aggregate_dense(weights: &Matrix, v: &Matrix) -> Result<Matrix> {
    aggregate_dense_counted(weights, v, &MacCounter::new())
}

pub fn aggregate_dense_counted(weights: &Matrix, v: &Matrix, counter: &MacCounter) -> Result<Matrix> {
    if !weights.is_square() || weights.rows() != v.rows() {
        return Err(Error::Shape(format!("weights {:?} cannot aggregate values {:?}", weights.shape(), v.shape())));
    }
    matmul_counted(weights, v, counter)
}

/// Full `N × N` softmax over every column (no mask).
pub fn dense_softmax(a: &AffinityMatrix, sign: SoftmaxSign) -> Matrix {
    let n = a.n();
    let s = sign.factor();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = a.row(i);
        let max = row.iter().map(|&x| s * x).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|&x| (s * x - max).exp()).sum();
        for j in 0..n {
            out[(i, j)] = (s * row[j] - max).exp() / total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laa::{AffinityKind, AffinityScale};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affinity(values: Matrix) -> AffinityMatrix {
        AffinityMatrix { values, kind: AffinityKind::Dense, scale: AffinityScale::Off }
    }

    fn random_affinity(n: usize, seed: u64) -> AffinityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        affinity(Matrix::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0)))
    }

    /// Dense masked softmax computed on a full matrix with −∞ outside the mask.
    fn masked_softmax_oracle(a: &AffinityMatrix, m: &NeighborMask, s: f64) -> Matrix {
        let n = a.n();
        let dense = m.to_dense();
        Matrix::from_fn(n, n, |i, j| {
            let logits: Vec<f64> =
                (0..n).map(|t| if dense[i][t] { s * a.values[(i, t)] } else { f64::NEG_INFINITY }).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            (logits[j] - max).exp() / z
        })
    }

    #[test]
    fn full_k_gives_all_true() {
        let a = random_affinity(5, 1);
        for include_self in [true, false] {
            let m = topk_mask(&a, 5, include_self).unwrap();
            assert_eq!(m.nnz(), 25);
            assert_eq!(reciprocal_mask(&m).nnz(), 25);
        }
    }

    #[test]
    fn dominant_diagonal_k1_is_identity() {
        let a = affinity(Matrix::from_rows(&[vec![3.0, 1.0, 0.5], vec![1.0, 2.0, 0.2], vec![0.5, 0.2, 1.0]]).unwrap());
        let m = topk_mask(&a, 1, false).unwrap();
        assert_eq!(m.rows(), &[vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn topk_matches_full_sort() {
        let a = random_affinity(8, 2);
        let plain = topk_mask(&a, 3, false).unwrap();
        let with_self = topk_mask(&a, 3, true).unwrap();
        for i in 0..8 {
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&x, &y| a.values[(i, y)].partial_cmp(&a.values[(i, x)]).unwrap());
            let mut top: Vec<usize> = order[..3].to_vec();
            top.sort_unstable();
            assert_eq!(plain.row(i), top.as_slice());

            let mut top_self: Vec<usize> = order.iter().copied().filter(|&j| j != i).take(2).collect();
            top_self.push(i);
            top_self.sort_unstable();
            assert_eq!(with_self.row(i), top_self.as_slice());
        }
    }

    #[test]
    fn topk_mask_rejects_bad_k() {
        let a = random_affinity(4, 3);
        assert!(matches!(topk_mask(&a, 0, true), Err(Error::Parameter(_))));
        assert!(matches!(topk_mask(&a, 5, true), Err(Error::Parameter(_))));
    }

    #[test]
    fn reciprocal_hand_example() {
        let a = affinity(Matrix::from_rows(&[vec![1.0, 0.9, 0.1], vec![0.9, 1.0, 0.2], vec![0.1, 0.2, 1.0]]).unwrap());
        let mk = topk_mask(&a, 2, true).unwrap();
        assert_eq!(mk.rows(), &[vec![0, 1], vec![0, 1], vec![1, 2]]);
        let m = reciprocal_mask(&mk);
        assert_eq!(m.rows(), &[vec![0, 1], vec![0, 1], vec![2]]);
    }

    #[test]
    fn reciprocal_of_symmetric_is_identity_op() {
        let mk = NeighborMask::from_rows(3, 2, vec![vec![0, 2], vec![1], vec![0, 2]]).unwrap();
        assert_eq!(reciprocal_mask(&mk), mk);
    }

    #[test]
    fn query_isolation_keeps_self() {
        let mk = NeighborMask::from_rows(3, 3, vec![vec![0, 1, 2]; 3]).unwrap();
        let m = isolate_queries(&mk, &[true, true, false]).unwrap();
        assert_eq!(m.rows(), &[vec![0, 2], vec![1, 2], vec![0, 1, 2]]);
        assert!(isolate_queries(&mk, &[true]).is_err());
    }

    #[test]
    fn rns_trivial_rows() {
        let a = affinity(Matrix::from_rows(&[vec![0.3, 0.7, 0.7], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let m = NeighborMask::from_rows(3, 2, vec![vec![1, 2], vec![1], vec![]]).unwrap();
        let att = rns_weights(&a, &m, SoftmaxSign::Positive).unwrap();
        assert_eq!(att.row(0), &[(1, 0.5), (2, 0.5)]);
        assert_eq!(att.row(1), &[(1, 1.0)]);
        // empty support falls back to self
        assert_eq!(att.row(2), &[(2, 1.0)]);

        let one = affinity(Matrix::from_rows(&[vec![4.2]]).unwrap());
        let m = reciprocal_mask(&topk_mask(&one, 1, true).unwrap());
        assert_eq!(rns_weights(&one, &m, SoftmaxSign::Negative).unwrap().row(0), &[(0, 1.0)]);
    }

    #[test]
    fn rns_matches_masked_softmax_oracle() {
        for seed in 0..20 {
            let a = random_affinity(6, seed);
            let m = reciprocal_mask(&topk_mask(&a, 2, true).unwrap());
            for sign in [SoftmaxSign::Positive, SoftmaxSign::Negative] {
                let att = rns_weights(&a, &m, sign).unwrap();
                let oracle = masked_softmax_oracle(&a, &m, sign.factor());
                assert!(att.to_dense().max_abs_diff(&oracle) <= 1e-12);
            }
        }
    }

    #[test]
    fn negative_sign_prefers_small_affinity() {
        let a = affinity(Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let m = NeighborMask::from_rows(2, 2, vec![vec![0, 1], vec![0, 1]]).unwrap();
        let pos = rns_weights(&a, &m, SoftmaxSign::Positive).unwrap();
        let neg = rns_weights(&a, &m, SoftmaxSign::Negative).unwrap();
        assert!(pos.row(0)[0].1 > 0.5 && neg.row(0)[0].1 < 0.5);
    }

    #[test]
    fn overflow_safe() {
        let a = affinity(Matrix::from_rows(&[vec![1000.0, 999.0], vec![-1000.0, -999.0]]).unwrap());
        let m = NeighborMask::from_rows(2, 2, vec![vec![0, 1], vec![0, 1]]).unwrap();
        let att = rns_weights(&a, &m, SoftmaxSign::Positive).unwrap();
        for row in att.rows() {
            assert!(row.iter().all(|&(_, w)| w.is_finite() && w > 0.0));
        }
    }

    #[test]
    fn aggregation_examples() {
        let v = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(aggregate_sparse(&SparseAttention::identity(2), &v).unwrap(), v);
        let att = SparseAttention::from_rows(2, vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]]).unwrap();
        assert_eq!(aggregate_sparse(&att, &v).unwrap().row(0), &[1.0, 1.0]);
        assert!(aggregate_sparse(&att, &Matrix::zeros(3, 2)).is_err());

        assert_eq!(aggregate_dense(&Matrix::identity(2), &v).unwrap(), v);
        let uniform = Matrix::from_fn(2, 2, |_, _| 0.5);
        let u = aggregate_dense(&uniform, &v).unwrap();
        assert_eq!(u.row(0), &[1.0, 1.0]);
        assert_eq!(u.row(1), &[1.0, 1.0]);
        assert!(aggregate_dense(&Matrix::zeros(2, 3), &v).is_err());
    }

    #[test]
    fn sparse_matches_dense_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d, k) = (12, 5, 4);
        let a = random_affinity(n, 10);
        let v = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let m = reciprocal_mask(&topk_mask(&a, k, true).unwrap());
        let att = rns_weights(&a, &m, SoftmaxSign::Positive).unwrap();
        let sparse_counter = MacCounter::new();
        let dense_counter = MacCounter::new();
        let u = aggregate_sparse_counted(&att, &v, &sparse_counter).unwrap();
        let oracle = aggregate_dense_counted(&att.to_dense(), &v, &dense_counter).unwrap();
        assert!(u.max_abs_diff(&oracle) <= 1e-10);
        assert!(sparse_counter.get() <= (n * k * d) as u64);
        assert_eq!(dense_counter.get(), (n * n * d) as u64);
    }

    #[test]
    fn dense_softmax_rows_are_stochastic() {
        let a = random_affinity(7, 4);
        let w = dense_softmax(&a, SoftmaxSign::Positive);
        for row in w.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mask_and_weight_invariants(seed in any::<u64>(), n in 1usize..40, k_frac in 0.0f64..1.0) {
                let k = 1 + ((n - 1) as f64 * k_frac) as usize;
                let a = random_affinity(n, seed);
                let mk = topk_mask(&a, k, true).unwrap();
                let m = reciprocal_mask(&mk);
                prop_assert!(m.is_symmetric());
                for i in 0..n {
                    prop_assert_eq!(mk.row(i).len(), k);
                    prop_assert!(m.contains(i, i));
                    prop_assert!(m.row(i).iter().all(|&j| mk.contains(i, j)));
                }
                let att = rns_weights(&a, &m, SoftmaxSign::Positive).unwrap();
                for (i, row) in att.rows().iter().enumerate() {
                    let sum: f64 = row.iter().map(|&(_, w)| w).sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                    prop_assert!(row.iter().all(|&(_, w)| w > 0.0 && w <= 1.0));
                    let cols: Vec<usize> = row.iter().map(|&(j, _)| j).collect();
                    prop_assert_eq!(cols.as_slice(), m.row(i));
                }
            }
        }
    }
}
