//! One NFormer layer and the stacked forward pass.
//!
//! A layer runs projection → affinity (landmark or dense) → top-k mask →
//! reciprocal mask → masked softmax → sparse aggregation, then a two-layer
//! rectified feed-forward block. Residual connections wrap both sub-blocks
//! when enabled. There is no normalization layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laa::{
    affinity_dense_counted, affinity_laa_counted, project_qkv_counted, sample_landmarks, AffinityMatrix, AffinityScale,
    LandmarkSet, ProjectionSet,
};
use crate::linalg::{matmul_counted, MacCounter, Matrix};
use crate::rns::{aggregate_sparse_counted, isolate_queries, reciprocal_mask, rns_weights, topk_mask, SoftmaxSign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkPolicy {
    /// One landmark set per forward pass, reused by every layer.
    #[default]
    Shared,
    /// A fresh landmark set for each layer.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityMode {
    /// Landmark-agent factorization.
    #[default]
    Laa,
    /// Exact `q kᵀ`.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NFormerConfig {
    pub layers: usize,
    /// Landmark count.
    pub l: usize,
    /// Neighbor count.
    pub k: usize,
    /// Feature dimension.
    pub d: usize,
    pub scale: AffinityScale,
    pub sign: SoftmaxSign,
    pub residual: bool,
    pub feed_forward: bool,
    pub landmark_policy: LandmarkPolicy,
    pub affinity: AffinityMode,
    /// Force each row into its own top-k set.
    pub include_self: bool,
    pub seed: u64,
}

impl Default for NFormerConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            l: 5,
            k: 20,
            d: 256,
            scale: AffinityScale::SqrtDim,
            sign: SoftmaxSign::Positive,
            residual: true,
            feed_forward: true,
            landmark_policy: LandmarkPolicy::Shared,
            affinity: AffinityMode::Laa,
            include_self: true,
            seed: 0,
        }
    }
}

impl NFormerConfig {
    /// Checks the run-time constraints for an input of `n` rows.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Parameter("empty input".into()));
        }
        if self.k == 0 || self.k > n {
            return Err(Error::Parameter(format!("k = {} outside 1..={n}", self.k)));
        }
        if self.affinity == AffinityMode::Laa && (self.l == 0 || self.l > n) {
            return Err(Error::Parameter(format!("l = {} outside 1..={n}", self.l)));
        }
        Ok(())
    }

    /// Landmarks used by layer `layer` under this config.
    pub fn landmarks_for_layer(&self, n: usize, layer: usize) -> Result<LandmarkSet> {
        let seed = match self.landmark_policy {
            LandmarkPolicy::Shared => self.seed,
            LandmarkPolicy::PerLayer => self.seed.wrapping_add(layer as u64),
        };
        sample_landmarks(n, self.l, seed)
    }
}

/// Parameters of one layer: projections plus the feed-forward block
/// `relu(x·ff1 + b1)·ff2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub projections: ProjectionSet,
    pub ff1: Matrix,
    pub b1: Vec<f64>,
    pub ff2: Matrix,
    pub b2: Vec<f64>,
}

impl LayerWeights {
    pub fn new(projections: ProjectionSet, ff1: Matrix, b1: Vec<f64>, ff2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let w = Self { projections, ff1, b1, ff2, b2 };
        w.validate()?;
        Ok(w)
    }

    /// Identity projections and an all-zero feed-forward block.
    pub fn identity(d: usize) -> Self {
        Self {
            projections: ProjectionSet::identity(d),
            ff1: Matrix::identity(d),
            b1: vec![0.0; d],
            ff2: Matrix::zeros(d, d),
            b2: vec![0.0; d],
        }
    }

    /// Random projections and feed-forward weights (variance `1/d`), zero
    /// biases.
    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std-dev");
        let ff1 = Matrix::from_fn(d, d, |_, _| normal.sample(&mut rng));
        let ff2 = Matrix::from_fn(d, d, |_, _| normal.sample(&mut rng));
        Self { projections: ProjectionSet::random(d, seed), ff1, b1: vec![0.0; d], ff2, b2: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.projections.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.ff1.shape() != (d, d) || self.ff2.shape() != (d, d) {
            return Err(Error::Shape(format!("feed-forward matrices must be {d}x{d}")));
        }
        if self.b1.len() != d || self.b2.len() != d {
            return Err(Error::Shape(format!("feed-forward biases must have length {d}")));
        }
        Ok(())
    }
}

/// Optional inputs to a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Rows flagged `true` never attend to each other (self excepted).
    pub query_flags: Option<Vec<bool>>,
    /// Overrides landmark sampling for every layer.
    pub landmarks: Option<LandmarkSet>,
}

/// Attention sub-block output before any residual: `u = s(Ã)·v`.
pub fn attention_block(
    z: &Matrix,
    w: &LayerWeights,
    cfg: &NFormerConfig,
    landmarks: &LandmarkSet,
    query_flags: Option<&[bool]>,
    counter: &MacCounter,
) -> Result<Matrix> {
    let (q, k, v) = project_qkv_counted(z, &w.projections, counter)?;
    let affinity: AffinityMatrix = match cfg.affinity {
        AffinityMode::Laa => affinity_laa_counted(&q, &k, landmarks, cfg.scale, counter)?,
        AffinityMode::Dense => affinity_dense_counted(&q, &k, cfg.scale, counter)?,
    };
    let mut mask = reciprocal_mask(&topk_mask(&affinity, cfg.k, cfg.include_self)?);
    if let Some(flags) = query_flags {
        mask = isolate_queries(&mask, flags)?;
    }
    let attention = rns_weights(&affinity, &mask, cfg.sign)?;
    aggregate_sparse_counted(&attention, &v, counter)
}

fn feed_forward(h: &Matrix, w: &LayerWeights, counter: &MacCounter) -> Result<Matrix> {
    let mut hidden = matmul_counted(h, &w.ff1, counter)?;
    for i in 0..hidden.rows() {
        for (x, b) in hidden.row_mut(i).iter_mut().zip(&w.b1) {
            *x = (*x + b).max(0.0);
        }
    }
    let mut out = matmul_counted(&hidden, &w.ff2, counter)?;
    for i in 0..out.rows() {
        for (x, b) in out.row_mut(i).iter_mut().zip(&w.b2) {
            *x += b;
        }
    }
    Ok(out)
}

pub fn nformer_layer(z: &Matrix, w: &LayerWeights, cfg: &NFormerConfig, landmarks: &LandmarkSet) -> Result<Matrix> {
    nformer_layer_counted(z, w, cfg, landmarks, None, &MacCounter::new())
}

pub fn nformer_layer_counted(
    z: &Matrix,
    w: &LayerWeights,
    cfg: &NFormerConfig,
    landmarks: &LandmarkSet,
    query_flags: Option<&[bool]>,
    counter: &MacCounter,
) -> Result<Matrix> {
    cfg.validate(z.rows())?;
    w.validate()?;
    let u = attention_block(z, w, cfg, landmarks, query_flags, counter)?;
    let h = if cfg.residual { z.add(&u)? } else { u };
    if !cfg.feed_forward {
        return Ok(h);
    }
    let f = feed_forward(&h, w, counter)?;
    if cfg.residual {
        h.add(&f)
    } else {
        Ok(f)
    }
}

/// Applies `weights.len() == cfg.layers` layers in sequence.
pub fn nformer_forward(z: &Matrix, weights: &[LayerWeights], cfg: &NFormerConfig) -> Result<Matrix> {
    nformer_forward_with(z, weights, cfg, &ForwardOptions::default(), &MacCounter::new())
}

pub fn nformer_forward_with(
    z: &Matrix,
    weights: &[LayerWeights],
    cfg: &NFormerConfig,
    opts: &ForwardOptions,
    counter: &MacCounter,
) -> Result<Matrix> {
    if weights.len() != cfg.layers {
        return Err(Error::Config(format!("{} weight sets for {} layers", weights.len(), cfg.layers)));
    }
    if let Some(w) = weights.iter().find(|w| w.dim() != z.cols()) {
        return Err(Error::Config(format!("layer dimension {} does not match features ({})", w.dim(), z.cols())));
    }
    let n = z.rows();
    let mut out = z.clone();
    for (layer, w) in weights.iter().enumerate() {
        let landmarks = match (&opts.landmarks, cfg.affinity) {
            (Some(set), _) => set.clone(),
            // unused by the dense path, but keeps the layer signature uniform
            (None, AffinityMode::Dense) => LandmarkSet { indices: vec![0], seed: cfg.seed },
            (None, AffinityMode::Laa) => cfg.landmarks_for_layer(n, layer)?,
        };
        out = nformer_layer_counted(&out, w, cfg, &landmarks, opts.query_flags.as_deref(), counter)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laa::project_qkv;
    use crate::linalg::matmul;
    use crate::rns::dense_softmax;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn cfg(n_layers: usize, d: usize) -> NFormerConfig {
        NFormerConfig { layers: n_layers, d, l: 3, k: 4, ..Default::default() }
    }

    #[test]
    fn single_sample_is_fixed_point() {
        let z = Matrix::from_rows(&[vec![0.3, -0.4, 1.2]]).unwrap();
        let c = NFormerConfig { layers: 1, l: 1, k: 1, d: 3, ..Default::default() };
        let lm = sample_landmarks(1, 1, 0).unwrap();
        let out = nformer_layer(&z, &LayerWeights::identity(3), &c, &lm).unwrap();
        // u = z (self-attention only), then the zero FF adds nothing: z + u = 2z
        assert_eq!(out, z.scaled(2.0));
        let c = NFormerConfig { residual: false, feed_forward: false, ..c };
        assert_eq!(nformer_layer(&z, &LayerWeights::identity(3), &c, &lm).unwrap(), z);
    }

    #[test]
    fn full_k_matches_dense_attention() {
        let z = random(9, 4, 1);
        let w = LayerWeights::random(4, 3);
        let c = NFormerConfig { k: 9, l: 4, d: 4, residual: false, feed_forward: false, ..Default::default() };
        let lm = sample_landmarks(9, 4, 2).unwrap();
        let out = nformer_layer(&z, &w, &c, &lm).unwrap();

        let (q, k, v) = project_qkv(&z, &w.projections).unwrap();
        let a = crate::laa::affinity_laa(&q, &k, &lm, c.scale).unwrap();
        let oracle = matmul(&dense_softmax(&a, c.sign), &v).unwrap();
        assert!(out.max_abs_diff(&oracle) <= 1e-9 * oracle.max_abs().max(1.0));
    }

    #[test]
    fn zero_layers_is_identity() {
        let z = random(5, 3, 2);
        assert_eq!(nformer_forward(&z, &[], &cfg(0, 3)).unwrap(), z);
    }

    #[test]
    fn two_layers_compose() {
        let z = random(10, 4, 3);
        let ws = vec![LayerWeights::random(4, 1), LayerWeights::random(4, 2)];
        let c = cfg(2, 4);
        let lm = c.landmarks_for_layer(10, 0).unwrap();
        let manual = nformer_layer(&nformer_layer(&z, &ws[0], &c, &lm).unwrap(), &ws[1], &c, &lm).unwrap();
        assert_eq!(nformer_forward(&z, &ws, &c).unwrap(), manual);

        let per_layer = NFormerConfig { landmark_policy: LandmarkPolicy::PerLayer, ..c.clone() };
        let lm1 = per_layer.landmarks_for_layer(10, 1).unwrap();
        let manual =
            nformer_layer(&nformer_layer(&z, &ws[0], &per_layer, &lm).unwrap(), &ws[1], &per_layer, &lm1).unwrap();
        assert_eq!(nformer_forward(&z, &ws, &per_layer).unwrap(), manual);
    }

    #[test]
    fn forward_is_deterministic() {
        let z = random(12, 4, 4);
        let ws: Vec<_> = (0..3).map(|s| LayerWeights::random(4, s)).collect();
        let c = cfg(3, 4);
        let a = nformer_forward(&z, &ws, &c).unwrap();
        let b = nformer_forward(&z, &ws, &c).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn config_errors() {
        let z = random(4, 3, 5);
        let err = nformer_forward(&z, &[LayerWeights::identity(3)], &cfg(2, 3));
        assert!(matches!(err, Err(Error::Config(_))));
        let err = nformer_forward(&z, &[LayerWeights::identity(5)], &cfg(1, 5));
        assert!(matches!(err, Err(Error::Config(_))));
        let c = NFormerConfig { k: 5, ..cfg(1, 3) };
        assert!(matches!(nformer_forward(&z, &[LayerWeights::identity(3)], &c), Err(Error::Parameter(_))));
    }

    #[test]
    fn query_rows_do_not_mix() {
        // Two identical query rows would otherwise average together.
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        let c = NFormerConfig {
            layers: 1,
            k: 3,
            d: 2,
            affinity: AffinityMode::Dense,
            residual: false,
            feed_forward: false,
            ..Default::default()
        };
        let opts = ForwardOptions { query_flags: Some(vec![true, true, false]), landmarks: None };
        let counter = MacCounter::new();
        let out = nformer_forward_with(&z, &[LayerWeights::identity(2)], &c, &opts, &counter).unwrap();
        // query row 0 only sees itself and the gallery row
        let a = [1.0 / 2f64.sqrt(), 0.0];
        let (e0, e2) = (a[0].exp(), a[1].exp());
        let expected = [e0 / (e0 + e2), e2 / (e0 + e2)];
        assert!((out[(0, 0)] - expected[0]).abs() < 1e-12);
        assert!((out[(0, 1)] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn layer_mac_count() {
        let (n, d, l, k) = (16, 4, 3, 5);
        let z = random(n, d, 6);
        let c = NFormerConfig { layers: 1, l, k, d, ..Default::default() };
        let counter = MacCounter::new();
        let lm = sample_landmarks(n, l, 0).unwrap();
        nformer_layer_counted(&z, &LayerWeights::random(d, 1), &c, &lm, None, &counter).unwrap();
        let fixed = 3 * n * d * d + 2 * n * l * d + n * n * l + 2 * n * d * d;
        assert!(counter.get() as usize > fixed && counter.get() as usize <= fixed + n * k * d);
    }
}
