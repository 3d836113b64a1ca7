//! Analytic cost model in multiply-accumulates (MACs); one MAC is two FLOPs.
//!
//! Two scopes are reported. The *attention* scope counts only the parts that
//! differ between a dense transformer and an NFormer layer: affinity and
//! aggregation. The *full* scope adds the q/k/v projections (`3·N·d²`) and the
//! feed-forward block (`2·N·d²`), which both models share.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopParams {
    pub n: u64,
    pub d: u64,
    pub l: u64,
    pub k: u64,
    pub layers: u64,
}

/// Dense-transformer and NFormer costs for one scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeCost {
    pub dense_macs_per_layer: u64,
    pub nformer_macs_per_layer: u64,
    pub dense_macs_total: u64,
    pub nformer_macs_total: u64,
    /// Total FLOPs divided by `N`, in GFLOPs.
    pub dense_gflops_per_person: f64,
    pub nformer_gflops_per_person: f64,
    /// Dense cost over NFormer cost.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub params: FlopParams,
    /// `N²·d`.
    pub dense_affinity_macs: u64,
    /// `2·N·l·d + N²·l`.
    pub laa_affinity_macs: u64,
    /// `N²·d`.
    pub dense_agg_macs: u64,
    /// Upper bound `N·k·d`; the reciprocal mask can only shrink it.
    pub sparse_agg_macs: u64,
    pub projection_macs: u64,
    pub feed_forward_macs: u64,
    /// `N²·l / N²·d = l/d`: the product term of the affinity.
    pub affinity_product_ratio: f64,
    /// Whole landmark affinity over dense affinity.
    pub affinity_ratio: f64,
    /// `N·k·d / N²·d = k/N`.
    pub aggregation_ratio: f64,
    pub attention: ScopeCost,
    pub full: ScopeCost,
}

fn scope(dense: u64, nformer: u64, p: &FlopParams) -> ScopeCost {
    let per_person = |macs: u64| 2.0 * macs as f64 / p.n as f64 / 1e9;
    ScopeCost {
        dense_macs_per_layer: dense,
        nformer_macs_per_layer: nformer,
        dense_macs_total: dense * p.layers,
        nformer_macs_total: nformer * p.layers,
        dense_gflops_per_person: per_person(dense * p.layers),
        nformer_gflops_per_person: per_person(nformer * p.layers),
        ratio: dense as f64 / nformer as f64,
    }
}

pub fn flop_model(n: u64, d: u64, l: u64, k: u64, layers: u64) -> Result<FlopReport> {
    if [n, d, l, k, layers].contains(&0) {
        return Err(Error::Parameter("cost model parameters must be positive".into()));
    }
    let params = FlopParams { n, d, l, k, layers };
    let dense_affinity_macs = n * n * d;
    let laa_affinity_macs = 2 * n * l * d + n * n * l;
    let dense_agg_macs = n * n * d;
    let sparse_agg_macs = n * k * d;
    let projection_macs = 3 * n * d * d;
    let feed_forward_macs = 2 * n * d * d;

    let dense_attention = dense_affinity_macs + dense_agg_macs;
    let nformer_attention = laa_affinity_macs + sparse_agg_macs;
    let shared = projection_macs + feed_forward_macs;
    Ok(FlopReport {
        params,
        dense_affinity_macs,
        laa_affinity_macs,
        dense_agg_macs,
        sparse_agg_macs,
        projection_macs,
        feed_forward_macs,
        affinity_product_ratio: l as f64 / d as f64,
        affinity_ratio: laa_affinity_macs as f64 / dense_affinity_macs as f64,
        aggregation_ratio: k as f64 / n as f64,
        attention: scope(dense_attention, nformer_attention, &params),
        full: scope(dense_attention + shared, nformer_attention + shared, &params),
    })
}
