//! Attention benchmark records and the timing protocol.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;
use y12_core::attention::{area_attention_with, attention_cost, sdpa_with_stats};
use y12_core::{AttentionConfig, Kernel, KernelStats, Tensor};

pub const WARMUP: usize = 5;
pub const MIN_REPS: usize = 30;
pub const VERIFY_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchKernel {
    Naive,
    Area,
    Tiled,
}

impl BenchKernel {
    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::Naive => "naive",
            BenchKernel::Area => "area",
            BenchKernel::Tiled => "tiled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub kernel: BenchKernel,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub areas: usize,
    #[serde(rename = "Br")]
    pub tile_rows: usize,
    #[serde(rename = "Bc")]
    pub tile_cols: usize,
    pub flops: u64,
    pub peak_scratch_elements: u64,
    pub wall_ns_median: u64,
    pub wall_ns_p10: u64,
    pub wall_ns_p90: u64,
    pub reps: usize,
    pub thread_count: usize,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str =
        "kernel,n,d,L,Br,Bc,flops,peak_scratch_elements,wall_ns_median,wall_ns_p10,wall_ns_p90,reps,thread_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.kernel.name(),
            self.n,
            self.d,
            self.areas,
            self.tile_rows,
            self.tile_cols,
            self.flops,
            self.peak_scratch_elements,
            self.wall_ns_median,
            self.wall_ns_p10,
            self.wall_ns_p90,
            self.reps,
            self.thread_count
        )
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Median, p10 and p90 of `samples`.
pub fn spread(samples: &mut [f64]) -> (f64, f64, f64) {
    samples.sort_by(f64::total_cmp);
    (percentile(samples, 0.5), percentile(samples, 0.1), percentile(samples, 0.9))
}

/// One benchmark point: identical seeded inputs for every kernel.
pub struct Case {
    pub n: usize,
    pub d: usize,
    pub cfg: AttentionConfig,
    q: Tensor<f32>,
    k: Tensor<f32>,
    v: Tensor<f32>,
}

impl Case {
    pub fn new(n: usize, d: usize, areas: usize, tiles: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32) ^ ((d as u64) << 16) ^ areas as u64);
        let mut t = || Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng);
        let (q, k, v) = (t(), t(), t());
        let cfg = AttentionConfig { num_heads: 1, head_dim: d, num_areas: areas, tile_rows: tiles.0, tile_cols: tiles.1 };
        Self { n, d, cfg, q, k, v }
    }

    pub fn run(&self, kernel: BenchKernel, stats: &KernelStats) -> y12_core::Result<Tensor<f32>> {
        match kernel {
            BenchKernel::Naive => sdpa_with_stats(&self.q, &self.k, &self.v, stats),
            BenchKernel::Area => area_attention_with(&self.q, &self.k, &self.v, &self.cfg, Kernel::Naive, stats),
            BenchKernel::Tiled => area_attention_with(&self.q, &self.k, &self.v, &self.cfg, Kernel::Tiled, stats),
        }
    }

    /// Max-abs difference of the tiled kernel from the naive area reference.
    pub fn verify(&self, corrupt: bool) -> y12_core::Result<f64> {
        let reference = self.run(BenchKernel::Area, &KernelStats::new())?;
        let mut tiled = self.run(BenchKernel::Tiled, &KernelStats::new())?;
        if corrupt {
            tiled.data_mut()[0] += 1e-3;
        }
        Ok(tiled.max_abs_diff(&reference))
    }

    pub fn measure(&self, kernel: BenchKernel, reps: usize, threads: usize) -> y12_core::Result<BenchRecord> {
        let stats = KernelStats::new();
        self.run(kernel, &stats)?;
        let counted = stats.report();
        let expected = match kernel {
            BenchKernel::Naive => attention_cost(self.n, self.d, 1)?.flops,
            _ => attention_cost(self.n, self.d, self.cfg.num_areas)?.flops,
        };
        debug_assert_eq!(counted.flops, expected);
        for _ in 0..WARMUP {
            self.run(kernel, &KernelStats::new())?;
        }
        let mut samples: Vec<f64> = (0..reps)
            .map(|_| {
                let s = KernelStats::new();
                let t = Instant::now();
                let out = self.run(kernel, &s);
                let ns = t.elapsed().as_nanos() as f64;
                std::hint::black_box(out).map(|_| ns.max(1.0))
            })
            .collect::<y12_core::Result<_>>()?;
        let (median, p10, p90) = spread(&mut samples);
        let tiled = kernel == BenchKernel::Tiled;
        Ok(BenchRecord {
            kernel,
            n: self.n,
            d: self.d,
            areas: if kernel == BenchKernel::Naive { 1 } else { self.cfg.num_areas },
            tile_rows: if tiled { self.cfg.tile_rows } else { 0 },
            tile_cols: if tiled { self.cfg.tile_cols } else { 0 },
            flops: counted.flops,
            peak_scratch_elements: counted.peak_scratch_elements,
            wall_ns_median: median as u64,
            wall_ns_p10: p10 as u64,
            wall_ns_p90: p90 as u64,
            reps,
            thread_count: threads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let mut v: Vec<f64> = (1..=11).rev().map(f64::from).collect();
        assert_eq!(spread(&mut v), (6.0, 2.0, 10.0));
    }

    #[test]
    fn verification_gate() {
        let c = Case::new(64, 8, 4, (8, 8), 0);
        assert!(c.verify(false).unwrap() <= VERIFY_TOL);
        assert!(c.verify(true).unwrap() > VERIFY_TOL);
    }
}
