//! Wall-clock scaling benchmarks for the four attention kernels.
//!
//! Each kernel runs `reps` times on random Gaussian data; the record keeps
//! the median time and the instrumented MAC count of one run. Grid points
//! whose working set exceeds the memory budget (or fails to allocate) are
//! kept as `skipped` records rather than aborting the sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laa::{affinity_dense_counted, affinity_laa_counted, sample_landmarks, AffinityScale};
use crate::linalg::{MacCounter, Matrix};
use crate::rns::{
    aggregate_dense_counted, aggregate_sparse_counted, dense_softmax, reciprocal_mask, rns_weights, topk_mask,
    SoftmaxSign,
};

/// Default memory budget for one grid point: 2 GiB.
pub const DEFAULT_MAX_BYTES: usize = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    DenseAffinity,
    LaaAffinity,
    DenseAggregation,
    SparseAggregation,
}

impl Kernel {
    pub const ALL: [Kernel; 4] =
        [Kernel::DenseAffinity, Kernel::LaaAffinity, Kernel::DenseAggregation, Kernel::SparseAggregation];

    /// Analytic count; for sparse aggregation this is the `N·k·d` ceiling.
    pub fn expected_macs(self, p: &GridPoint) -> u64 {
        let (n, d, l, k) = (p.n as u64, p.d as u64, p.l as u64, p.k as u64);
        match self {
            Kernel::DenseAffinity => n * n * d,
            Kernel::LaaAffinity => 2 * n * l * d + n * n * l,
            Kernel::DenseAggregation => n * n * d,
            Kernel::SparseAggregation => n * k * d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchStatus {
    Ok,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub k: usize,
    pub kernel: Kernel,
    pub reps: usize,
    pub median_seconds: f64,
    pub macs: u64,
    pub expected_macs: u64,
    pub status: BenchStatus,
}

impl BenchRecord {
    fn new(p: &GridPoint, kernel: Kernel, reps: usize) -> Self {
        BenchRecord {
            n: p.n,
            d: p.d,
            l: p.l,
            k: p.k,
            kernel,
            reps,
            median_seconds: 0.0,
            macs: 0,
            expected_macs: kernel.expected_macs(p),
            status: BenchStatus::Skipped,
        }
    }
}

/// Bytes held at once by the largest kernel: inputs plus two `N × N` buffers.
pub fn working_set_bytes(p: &GridPoint) -> Option<usize> {
    let nn = p.n.checked_mul(p.n)?.checked_mul(2)?;
    let nd = p.n.checked_mul(p.d)?.checked_mul(3)?;
    nn.checked_add(nd)?.checked_mul(8)
}

fn can_allocate(p: &GridPoint, max_bytes: usize) -> bool {
    let Some(bytes) = working_set_bytes(p) else { return false };
    if bytes > max_bytes {
        return false;
    }
    let mut probe: Vec<u8> = Vec::new();
    probe.try_reserve_exact(bytes).is_ok()
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn time_kernel<T>(reps: usize, mut run: impl FnMut(&MacCounter) -> Result<T>) -> Result<(f64, u64)> {
    let counter = MacCounter::new();
    let mut times = Vec::with_capacity(reps);
    let mut macs = 0;
    for _ in 0..reps {
        counter.reset();
        let start = Instant::now();
        std::hint::black_box(run(&counter)?);
        times.push(start.elapsed().as_secs_f64());
        macs = counter.get();
    }
    Ok((median(times), macs))
}

fn bench_point(p: &GridPoint, reps: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    if p.l > p.n || p.k > p.n {
        return Err(Error::Parameter(format!("l = {} and k = {} must not exceed n = {}", p.l, p.k, p.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = gaussian(p.n, p.d, &mut rng);
    let k = gaussian(p.n, p.d, &mut rng);
    let v = gaussian(p.n, p.d, &mut rng);
    let landmarks = sample_landmarks(p.n, p.l, seed)?;
    let scale = AffinityScale::SqrtDim;

    let laa = affinity_laa_counted(&q, &k, &landmarks, scale, &MacCounter::new())?;
    let mask = reciprocal_mask(&topk_mask(&laa, p.k, true)?);
    let sparse = rns_weights(&laa, &mask, SoftmaxSign::Positive)?;
    let dense_weights =
        dense_softmax(&affinity_dense_counted(&q, &k, scale, &MacCounter::new())?, SoftmaxSign::Positive);
    drop(laa);

    let mut out = Vec::with_capacity(Kernel::ALL.len());
    for kernel in Kernel::ALL {
        let (secs, macs) = match kernel {
            Kernel::DenseAffinity => time_kernel(reps, |c| affinity_dense_counted(&q, &k, scale, c))?,
            Kernel::LaaAffinity => time_kernel(reps, |c| affinity_laa_counted(&q, &k, &landmarks, scale, c))?,
            Kernel::DenseAggregation => time_kernel(reps, |c| aggregate_dense_counted(&dense_weights, &v, c))?,
            Kernel::SparseAggregation => time_kernel(reps, |c| aggregate_sparse_counted(&sparse, &v, c))?,
        };
        let mut rec = BenchRecord::new(p, kernel, reps);
        rec.median_seconds = secs;
        rec.macs = macs;
        rec.status = BenchStatus::Ok;
        out.push(rec);
    }
    Ok(out)
}

/// Runs every kernel at every grid point. Repetitions run sequentially.
pub fn bench_scaling(grid: &[GridPoint], reps: usize, seed: u64, max_bytes: usize) -> Result<Vec<BenchRecord>> {
    if grid.is_empty() {
        return Err(Error::Parameter("benchmark grid is empty".into()));
    }
    if reps == 0 {
        return Err(Error::Parameter("at least one repetition is required".into()));
    }
    let mut records = Vec::new();
    for p in grid {
        if [p.n, p.d, p.l, p.k].contains(&0) {
            return Err(Error::Parameter(format!("grid point {p:?} has a zero size")));
        }
        if !can_allocate(p, max_bytes) {
            log::warn!("skipping n = {}, d = {}: working set exceeds the memory budget", p.n, p.d);
            records.extend(Kernel::ALL.iter().map(|&kernel| BenchRecord::new(p, kernel, reps)));
            continue;
        }
        records.extend(bench_point(p, reps, seed)?);
    }
    Ok(records)
}

pub fn records_to_csv(records: &[BenchRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn records_from_csv(text: &str) -> Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(n: usize) -> GridPoint {
        GridPoint { n, d: 16, l: 4, k: 5 }
    }

    #[test]
    fn instrumented_counts_match_formulas() {
        let recs = bench_scaling(&[point(40), point(65)], 1, 3, DEFAULT_MAX_BYTES).unwrap();
        assert_eq!(recs.len(), 8);
        for r in &recs {
            assert_eq!(r.status, BenchStatus::Ok);
            match r.kernel {
                Kernel::SparseAggregation => assert!(r.macs <= r.expected_macs),
                _ => assert_eq!(r.macs, r.expected_macs, "{:?}", r.kernel),
            }
        }
    }

    #[test]
    fn oversized_points_are_skipped() {
        let huge = GridPoint { n: 200_000, d: 256, l: 5, k: 20 };
        let recs = bench_scaling(&[huge, point(10)], 1, 0, DEFAULT_MAX_BYTES).unwrap();
        assert_eq!(recs.len(), 8);
        assert!(recs[..4].iter().all(|r| r.status == BenchStatus::Skipped && r.macs == 0));
        assert!(recs[4..].iter().all(|r| r.status == BenchStatus::Ok));
    }

    #[test]
    fn bad_arguments() {
        assert!(bench_scaling(&[], 1, 0, DEFAULT_MAX_BYTES).is_err());
        assert!(bench_scaling(&[point(10)], 0, 0, DEFAULT_MAX_BYTES).is_err());
        assert!(bench_scaling(&[GridPoint { n: 3, d: 2, l: 5, k: 1 }], 1, 0, DEFAULT_MAX_BYTES).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let recs = bench_scaling(&[point(12)], 3, 1, DEFAULT_MAX_BYTES).unwrap();
        let text = records_to_csv(&recs).unwrap();
        assert!(text.starts_with("n,d,l,k,kernel,reps,median_seconds,macs,expected_macs,status\n"));
        assert_eq!(records_from_csv(&text).unwrap(), recs);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    #[ignore = "timing-sensitive"]
    fn laa_beats_dense_at_scale() {
        let p = GridPoint { n: 4096, d: 256, l: 5, k: 20 };
        let recs = bench_scaling(&[p], 3, 0, DEFAULT_MAX_BYTES).unwrap();
        let t = |k| recs.iter().find(|r| r.kernel == k).unwrap().median_seconds;
        assert!(t(Kernel::LaaAffinity) < t(Kernel::DenseAffinity));
    }

    #[test]
    #[ignore = "timing-sensitive"]
    fn dense_affinity_scales_quadratically() {
        let grid = [GridPoint { n: 1024, d: 256, l: 5, k: 20 }, GridPoint { n: 2048, d: 256, l: 5, k: 20 }];
        let recs = bench_scaling(&grid, 5, 0, DEFAULT_MAX_BYTES).unwrap();
        let t: Vec<f64> = recs.iter().filter(|r| r.kernel == Kernel::DenseAffinity).map(|r| r.median_seconds).collect();
        let ratio = t[1] / t[0];
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }
}
