//! Synthetic identity data and retrieval scoring (CMC and mAP).
//!
//! Each identity gets a random unit centroid; its samples are the centroid
//! plus isotropic Gaussian noise, renormalized. A fraction of samples get an
//! extra, larger perturbation and are flagged as outliers. Queries are
//! ranked against the gallery by cosine similarity, once on the raw features
//! and once on the NFormer output.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize_rows, matmul_nt, Matrix};
use crate::stack::{nformer_forward_with, ForwardOptions, LayerWeights, NFormerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Gallery,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Gallery => "gallery",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Number of identities `P`.
    pub identities: usize,
    /// Images per identity `Q`.
    pub per_identity: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of the within-identity noise.
    pub sigma: f64,
    pub outlier_fraction: f64,
    /// Outliers get additional noise with standard deviation
    /// `outlier_scale · sigma`.
    pub outlier_scale: f64,
    /// Queries per identity; `None` means `max(1, Q / 5)`.
    pub queries_per_identity: Option<usize>,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            identities: 32,
            per_identity: 20,
            dim: 32,
            sigma: 0.35,
            outlier_fraction: 0.15,
            outlier_scale: 2.0,
            queries_per_identity: None,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn queries(&self) -> usize {
        self.queries_per_identity.unwrap_or((self.per_identity / 5).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.identities < 2 {
            return bad(format!("need at least 2 identities, got {}", self.identities));
        }
        if self.per_identity < 2 {
            return bad(format!("need at least 2 images per identity, got {}", self.per_identity));
        }
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier fraction {} outside [0, 1)", self.outlier_fraction));
        }
        if !(self.sigma >= 0.0 && self.outlier_scale >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        let q = self.queries();
        if q == 0 || q >= self.per_identity {
            return bad(format!("{q} queries leaves no gallery out of {} images", self.per_identity));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `N × d`, unit rows.
    pub features: Matrix,
    pub labels: Vec<u32>,
    pub roles: Vec<Role>,
    pub outliers: Vec<bool>,
    pub params: SynthParams,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn query_flags(&self) -> Vec<bool> {
        self.roles.iter().map(|&r| r == Role::Query).collect()
    }

    fn indices_with(&self, role: Role) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.indices_with(Role::Query)
    }

    pub fn gallery_indices(&self) -> Vec<usize> {
        self.indices_with(Role::Gallery)
    }
}

pub fn synth_generate(params: &SynthParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let (p, q, d) = (params.identities, params.per_identity, params.dim);
    let n = p * q;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let outlier_noise =
        Normal::new(0.0, params.outlier_scale * params.sigma).map_err(|e| Error::Parameter(e.to_string()))?;

    let mut centroids = Vec::with_capacity(p);
    while centroids.len() < p {
        let c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            centroids.push(c.into_iter().map(|v| v / norm).collect::<Vec<_>>());
        }
    }

    let mut raw = Matrix::zeros(n, d);
    for i in 0..n {
        let c = &centroids[i / q];
        for (x, &cv) in raw.row_mut(i).iter_mut().zip(c) {
            *x = cv + noise.sample(&mut rng);
        }
    }

    let n_outliers = (params.outlier_fraction * n as f64).round() as usize;
    let mut outliers = vec![false; n];
    for i in sample(&mut rng, n, n_outliers) {
        outliers[i] = true;
        for x in raw.row_mut(i) {
            *x += outlier_noise.sample(&mut rng);
        }
    }

    let features = l2_normalize_rows(&raw)?;
    let labels = (0..n).map(|i| (i / q) as u32).collect();
    let nq = params.queries();
    let roles = (0..n).map(|i| if i % q < nq { Role::Query } else { Role::Gallery }).collect();
    Ok(SyntheticDataset { features, labels, roles, outliers, params: params.clone() })
}

/// Gallery indices per query, by descending inner product; ties go to the
/// smaller gallery index.
pub fn rank(queries: &Matrix, gallery: &Matrix) -> Result<Vec<Vec<usize>>> {
    if queries.cols() != gallery.cols() {
        return Err(Error::Shape(format!("queries have dimension {}, gallery {}", queries.cols(), gallery.cols())));
    }
    let sims = matmul_nt(queries, gallery)?;
    Ok(sims
        .row_iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// `cmc[K-1]`: fraction of queries with a correct identity in the top `K`.
pub fn cmc(rankings: &[Vec<usize>], query_labels: &[u32], gallery_labels: &[u32], k_max: usize) -> Vec<f64> {
    let mut hits = vec![0usize; k_max];
    for (ranking, &label) in rankings.iter().zip(query_labels) {
        if let Some(first) = ranking.iter().position(|&g| gallery_labels[g] == label) {
            for h in hits.iter_mut().skip(first) {
                *h += 1;
            }
        }
    }
    let total = rankings.len().max(1) as f64;
    hits.into_iter().map(|h| h as f64 / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Average precision of each scored query, in query order.
    pub per_query_ap: Vec<f64>,
    /// Queries with no relevant gallery item; not scored.
    pub excluded_queries: Vec<usize>,
}

/// Average precision per query; queries with no relevant gallery item are
/// excluded and listed.
pub fn mean_ap(rankings: &[Vec<usize>], query_labels: &[u32], gallery_labels: &[u32]) -> RetrievalResult {
    let mut per_query_ap = Vec::with_capacity(rankings.len());
    let mut excluded_queries = Vec::new();
    for (qi, (ranking, &label)) in rankings.iter().zip(query_labels).enumerate() {
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        for (pos, &g) in ranking.iter().enumerate() {
            if gallery_labels[g] == label {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
            }
        }
        if found == 0 {
            excluded_queries.push(qi);
        } else {
            per_query_ap.push(precision_sum / found as f64);
        }
    }
    let map = if per_query_ap.is_empty() { 0.0 } else { per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64 };
    RetrievalResult { cmc: Vec::new(), map, per_query_ap, excluded_queries }
}

/// CMC up to `k_max` plus mAP.
pub fn score(rankings: &[Vec<usize>], query_labels: &[u32], gallery_labels: &[u32], k_max: usize) -> RetrievalResult {
    let mut result = mean_ap(rankings, query_labels, gallery_labels);
    result.cmc = cmc(rankings, query_labels, gallery_labels, k_max);
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub before: RetrievalResult,
    pub after: RetrievalResult,
}

impl EvalOutcome {
    pub fn delta_map(&self) -> f64 {
        self.after.map - self.before.map
    }
}

fn score_features(features: &Matrix, ds: &SyntheticDataset, k_max: usize) -> Result<RetrievalResult> {
    let unit = l2_normalize_rows(features)?;
    let (qi, gi) = (ds.query_indices(), ds.gallery_indices());
    let rankings = rank(&unit.select_rows(&qi)?, &unit.select_rows(&gi)?)?;
    let ql: Vec<u32> = qi.iter().map(|&i| ds.labels[i]).collect();
    let gl: Vec<u32> = gi.iter().map(|&i| ds.labels[i]).collect();
    Ok(score(&rankings, &ql, &gl, k_max.min(gi.len())))
}

/// Scores retrieval on the raw features and on the NFormer output, with
/// query–query attention removed.
pub fn eval_pipeline(
    ds: &SyntheticDataset,
    cfg: &NFormerConfig,
    weights: &[LayerWeights],
    k_max: usize,
) -> Result<EvalOutcome> {
    let before = score_features(&ds.features, ds, k_max)?;
    let opts = ForwardOptions { query_flags: Some(ds.query_flags()), landmarks: None };
    let out = nformer_forward_with(&ds.features, weights, cfg, &opts, &Default::default())?;
    let after = score_features(&out, ds, k_max)?;
    Ok(EvalOutcome { before, after })
}

/// Mean over identities of the mean squared distance to the identity mean.
pub fn within_identity_variance(features: &Matrix, labels: &[u32]) -> f64 {
    let d = features.cols();
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let per_group: Vec<f64> = groups
        .values()
        .map(|members| {
            let mut mean = vec![0.0; d];
            for &i in members {
                for (m, x) in mean.iter_mut().zip(features.row(i)) {
                    *m += x / members.len() as f64;
                }
            }
            members
                .iter()
                .map(|&i| features.row(i).iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>()
                / members.len() as f64
        })
        .collect();
    per_group.iter().sum::<f64>() / per_group.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn noiseless_identities_are_points() {
        let p = SynthParams { sigma: 0.0, outlier_fraction: 0.0, ..Default::default() };
        let ds = synth_generate(&p).unwrap();
        for i in 0..ds.len() {
            let first = (i / p.per_identity) * p.per_identity;
            assert_eq!(ds.features.row(i), ds.features.row(first));
        }
    }

    #[test]
    fn label_histogram_and_roles() {
        let p = SynthParams { identities: 2, per_identity: 5, ..Default::default() };
        let ds = synth_generate(&p).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 5);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 5);
        for id in 0..2 {
            let roles: Vec<Role> = (0..10).filter(|&i| ds.labels[i] == id).map(|i| ds.roles[i]).collect();
            assert!(roles.contains(&Role::Query) && roles.contains(&Role::Gallery));
        }
        for row in ds.features.row_iter() {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        }
        let n_out = ds.outliers.iter().filter(|&&o| o).count();
        assert_eq!(n_out, 2); // round(0.15 * 10)
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SynthParams { seed: 42, ..Default::default() };
        assert_eq!(synth_generate(&p).unwrap(), synth_generate(&p).unwrap());
        let other = SynthParams { seed: 43, ..Default::default() };
        assert_ne!(synth_generate(&p).unwrap().features, synth_generate(&other).unwrap().features);
    }

    #[test]
    fn invalid_params() {
        for p in [
            SynthParams { identities: 1, ..Default::default() },
            SynthParams { per_identity: 1, ..Default::default() },
            SynthParams { outlier_fraction: 1.0, ..Default::default() },
            SynthParams { sigma: -1.0, ..Default::default() },
            SynthParams { queries_per_identity: Some(20), ..Default::default() },
        ] {
            assert!(matches!(synth_generate(&p), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn rank_examples() {
        let q = Matrix::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.6, 0.8, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(rank(&q, &g).unwrap(), vec![vec![1, 2, 0]]);
        assert!(rank(&q, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Matrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let g = Matrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let ranked = rank(&q, &g).unwrap();
        for (i, r) in ranked.iter().enumerate() {
            let mut pairs: Vec<(f64, usize)> =
                (0..30).map(|j| ((0..4).map(|c| q[(i, c)] * g[(j, c)]).sum(), j)).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            assert_eq!(r, &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        }
    }

    #[test]
    fn cmc_examples() {
        let perfect = vec![vec![0, 1], vec![1, 0]];
        assert_eq!(cmc(&perfect, &[0, 1], &[0, 1], 2), vec![1.0, 1.0]);
        assert_eq!(cmc(&[vec![0, 1, 2]], &[7], &[3, 7, 7], 3), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn map_examples() {
        let perfect = mean_ap(&[vec![0, 1, 2]], &[1], &[1, 1, 0]);
        assert_eq!(perfect.map, 1.0);
        let second = mean_ap(&[vec![0, 1]], &[1], &[0, 1]);
        assert_eq!(second.map, 0.5);
        let none = mean_ap(&[vec![0, 1], vec![0, 1]], &[5, 0], &[0, 1]);
        assert_eq!(none.excluded_queries, vec![0]);
        assert_eq!(none.per_query_ap, vec![1.0]);
    }

    #[test]
    fn metrics_match_definition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gl: Vec<u32> = (0..25).map(|_| rng.random_range(0..4)).collect();
        let ql: Vec<u32> = (0..10).map(|_| rng.random_range(0..4)).collect();
        let rankings: Vec<Vec<usize>> = (0..10)
            .map(|_| {
                let mut r: Vec<usize> = (0..25).collect();
                rand::seq::SliceRandom::shuffle(r.as_mut_slice(), &mut rng);
                r
            })
            .collect();
        let res = score(&rankings, &ql, &gl, 25);
        // Precision-recall area: sum over ranks of precision × Δrecall.
        let mut aps = Vec::new();
        for (r, &l) in rankings.iter().zip(&ql) {
            let relevant = gl.iter().filter(|&&g| g == l).count();
            if relevant == 0 {
                continue;
            }
            let mut ap = 0.0;
            for cut in 1..=25 {
                let tp = r[..cut].iter().filter(|&&g| gl[g] == l).count();
                let tp_prev = r[..cut - 1].iter().filter(|&&g| gl[g] == l).count();
                ap += (tp as f64 / cut as f64) * ((tp - tp_prev) as f64 / relevant as f64);
            }
            aps.push(ap);
        }
        assert!((res.map - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-12);
        for kk in 1..=25 {
            let hit = rankings.iter().zip(&ql).filter(|(r, &l)| r[..kk].iter().any(|&g| gl[g] == l)).count();
            assert!((res.cmc[kk - 1] - hit as f64 / 10.0).abs() < 1e-12);
        }
        assert!(res.cmc.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn map_invariant_under_identity_preserving_gallery_permutation() {
        let ds =
            synth_generate(&SynthParams { seed: 5, identities: 6, per_identity: 6, ..Default::default() }).unwrap();
        let (qi, mut gi) = (ds.query_indices(), ds.gallery_indices());
        let ql: Vec<u32> = qi.iter().map(|&i| ds.labels[i]).collect();
        let eval = |gi: &[usize]| {
            let r = rank(&ds.features.select_rows(&qi).unwrap(), &ds.features.select_rows(gi).unwrap()).unwrap();
            let gl: Vec<u32> = gi.iter().map(|&i| ds.labels[i]).collect();
            mean_ap(&r, &ql, &gl).map
        };
        let base = eval(&gi);
        gi.reverse();
        assert!((eval(&gi) - base).abs() < 1e-12);
    }

    #[test]
    fn zero_layers_leave_scores_unchanged() {
        let ds =
            synth_generate(&SynthParams { seed: 1, identities: 8, per_identity: 6, ..Default::default() }).unwrap();
        let cfg = NFormerConfig { layers: 0, d: 32, k: 5, ..Default::default() };
        let out = eval_pipeline(&ds, &cfg, &[], 10).unwrap();
        assert_eq!(out.before, out.after);
    }

    #[test]
    fn point_clusters_score_perfectly() {
        let ds = synth_generate(&SynthParams {
            sigma: 0.0,
            outlier_fraction: 0.0,
            identities: 8,
            per_identity: 10,
            ..Default::default()
        })
        .unwrap();
        let cfg = NFormerConfig {
            layers: 2,
            d: 32,
            k: 10,
            affinity: crate::stack::AffinityMode::Dense,
            feed_forward: false,
            ..Default::default()
        };
        let out = eval_pipeline(&ds, &cfg, &vec![LayerWeights::identity(32); 2], 10).unwrap();
        assert_eq!(out.before.map, 1.0);
        assert_eq!(out.after.map, 1.0);
    }
}
