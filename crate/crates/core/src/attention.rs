//! Scaled dot-product attention and its area-segmented and tiled realizations.
//!
//! All kernels operate on one head: `q`, `k`, `v` are `[n, d]` token matrices.
//! Every kernel takes a [`KernelStats`] that counts matmul FLOPs (multiply-add
//! counted as 2) and tracks live scratch elements through [`ScratchBuf`]
//! guards, so memory claims are measured rather than asserted.
//!
//! The tiled kernel streams K/V in blocks of `tile_cols` rows against Q blocks
//! of `tile_rows` rows with an online softmax (running max `m`, running
//! normalizer `l`, rescaled accumulator). The full `n × n` score matrix is
//! never allocated.

use crate::error::{cfg_err, dim_err, Result};
use crate::scalar::{gemm, Real};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::ops::{Deref, DerefMut};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_areas: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { num_heads: 1, head_dim: 32, num_areas: 4, tile_rows: 64, tile_cols: 64 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 || self.num_areas == 0 {
            return Err(cfg_err!("attention heads, head_dim and num_areas must be ≥ 1 ({self:?})"));
        }
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(cfg_err!("attention tile sizes must be ≥ 1 ({self:?})"));
        }
        Ok(())
    }

    pub fn with_areas(mut self, num_areas: usize) -> Self {
        self.num_areas = num_areas;
        self
    }

    pub fn with_tiles(mut self, rows: usize, cols: usize) -> Self {
        self.tile_rows = rows;
        self.tile_cols = cols;
        self
    }
}

/// Which kernel evaluates each area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Materializes the score matrix of each area.
    Naive,
    /// Online-softmax tiling; never materializes the score matrix.
    Tiled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub peak_scratch_elements: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ns: Option<u64>,
}

/// Instrumentation shared by the kernels: FLOP counter and a scratch allocator
/// that tracks live and peak element counts.
#[derive(Debug, Default)]
pub struct KernelStats {
    flops: Cell<u64>,
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl KernelStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn peak_scratch(&self) -> usize {
        self.peak.get()
    }

    pub fn live_scratch(&self) -> usize {
        self.live.get()
    }

    pub fn report(&self) -> CostReport {
        CostReport { flops: self.flops(), peak_scratch_elements: self.peak.get() as u64, wall_ns: None }
    }

    fn add_flops(&self, f: u64) {
        self.flops.set(self.flops.get() + f);
    }

    pub fn alloc<T: Real>(&self, len: usize) -> ScratchBuf<'_, T> {
        self.live.set(self.live.get() + len);
        self.peak.set(self.peak.get().max(self.live.get()));
        ScratchBuf { data: vec![T::zero(); len], stats: self }
    }
}

/// A scratch buffer whose lifetime is accounted in [`KernelStats`].
pub struct ScratchBuf<'s, T> {
    data: Vec<T>,
    stats: &'s KernelStats,
}

impl<T> Deref for ScratchBuf<'_, T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for ScratchBuf<'_, T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T> Drop for ScratchBuf<'_, T> {
    fn drop(&mut self) {
        self.stats.live.set(self.stats.live.get() - self.data.len());
    }
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    if q.rank() != 2 {
        return Err(dim_err!("attention expects [n, d] matrices, got Q {:?}", q.shape()));
    }
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(dim_err!(
            "attention shapes disagree: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok((q.dim(0), q.dim(1)))
}

/// `softmax(q kᵀ / √d) v` over row slices; writes `rows × d` into `out`.
fn naive_rows<T: Real>(q: &[T], k: &[T], v: &[T], rows: usize, d: usize, out: &mut [T], stats: &KernelStats) {
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut scores = stats.alloc::<T>(rows * rows);
    gemm(rows, d, rows, q, false, k, true, T::zero(), &mut scores);
    stats.add_flops(2 * (rows * rows * d) as u64);
    for row in scores.chunks_mut(rows) {
        let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s * scale));
        let mut total = T::zero();
        for s in row.iter_mut() {
            *s = (*s * scale - max).exp();
            total = total + *s;
        }
        for s in row.iter_mut() {
            *s = *s / total;
        }
    }
    gemm(rows, rows, d, &scores, false, v, false, T::zero(), out);
    stats.add_flops(2 * (rows * rows * d) as u64);
}

/// Online-softmax tiled attention over row slices.
#[allow(clippy::too_many_arguments)]
fn tiled_rows<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    tile_rows: usize,
    tile_cols: usize,
    out: &mut [T],
    stats: &KernelStats,
) {
    let br = tile_rows.clamp(1, n);
    let bc = tile_cols.clamp(1, n);
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut s_tile = stats.alloc::<T>(br * bc);
    let mut m = stats.alloc::<T>(br);
    let mut l = stats.alloc::<T>(br);
    let mut alpha = stats.alloc::<T>(br);
    let mut acc = stats.alloc::<T>(br * d);

    for r0 in (0..n).step_by(br) {
        let rows = br.min(n - r0);
        m[..rows].fill(T::neg_infinity());
        l[..rows].fill(T::zero());
        acc[..rows * d].fill(T::zero());
        let q_tile = &q[r0 * d..(r0 + rows) * d];
        for c0 in (0..n).step_by(bc) {
            let cols = bc.min(n - c0);
            let s = &mut s_tile[..rows * cols];
            gemm(rows, d, cols, q_tile, false, &k[c0 * d..(c0 + cols) * d], true, T::zero(), s);
            stats.add_flops(2 * (rows * cols * d) as u64);
            for i in 0..rows {
                let row = &mut s[i * cols..(i + 1) * cols];
                let tile_max = row.iter().fold(T::neg_infinity(), |mx, &x| mx.max(x * scale));
                let m_new = m[i].max(tile_max);
                alpha[i] = (m[i] - m_new).exp();
                let mut row_sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x * scale - m_new).exp();
                    row_sum = row_sum + *x;
                }
                l[i] = alpha[i] * l[i] + row_sum;
                m[i] = m_new;
                // rescale before accumulating the new tile
                for a in &mut acc[i * d..(i + 1) * d] {
                    *a = *a * alpha[i];
                }
            }
            gemm(rows, cols, d, s, false, &v[c0 * d..(c0 + cols) * d], false, T::one(), &mut acc[..rows * d]);
            stats.add_flops(2 * (rows * cols * d) as u64);
        }
        for i in 0..rows {
            let inv = T::one() / l[i];
            for j in 0..d {
                out[(r0 + i) * d + j] = acc[i * d + j] * inv;
            }
        }
    }
}

/// Scaled dot-product attention with a stable softmax.
pub fn sdpa<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    sdpa_with_stats(q, k, v, &KernelStats::new())
}

pub fn sdpa_with_stats<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, stats: &KernelStats) -> Result<Tensor<T>> {
    let (n, d) = check_qkv(q, k, v)?;
    let mut out = vec![T::zero(); n * d];
    naive_rows(q.data(), k.data(), v.data(), n, d, &mut out, stats);
    Tensor::new(&[n, d], out)
}

/// Tiled attention; numerically equal to [`sdpa`] up to rounding.
pub fn tiled_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, cfg: &AttentionConfig) -> Result<Tensor<T>> {
    tiled_attention_with_stats(q, k, v, cfg, &KernelStats::new())
}

pub fn tiled_attention_with_stats<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    stats: &KernelStats,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, d) = check_qkv(q, k, v)?;
    let mut out = vec![T::zero(); n * d];
    tiled_rows(q.data(), k.data(), v.data(), n, d, cfg.tile_rows, cfg.tile_cols, &mut out, stats);
    Tensor::new(&[n, d], out)
}

/// Attention restricted to `cfg.num_areas` contiguous token segments.
pub fn area_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, cfg: &AttentionConfig) -> Result<Tensor<T>> {
    area_attention_with(q, k, v, cfg, Kernel::Naive, &KernelStats::new())
}

/// Self-attention form where the tokens serve as Q, K and V.
pub fn area_self_attention<T: Real>(tokens: &Tensor<T>, cfg: &AttentionConfig) -> Result<Tensor<T>> {
    area_attention(tokens, tokens, tokens, cfg)
}

pub fn area_attention_with<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    kernel: Kernel,
    stats: &KernelStats,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (n, d) = check_qkv(q, k, v)?;
    let mut out = vec![T::zero(); n * d];
    area_attention_slices(q.data(), k.data(), v.data(), n, d, cfg, kernel, &mut out, stats)?;
    Tensor::new(&[n, d], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn area_attention_slices<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    cfg: &AttentionConfig,
    kernel: Kernel,
    out: &mut [T],
    stats: &KernelStats,
) -> Result<()> {
    let areas = cfg.num_areas;
    if areas == 0 || n % areas != 0 {
        return Err(cfg_err!("token count {n} is not divisible by num_areas {areas}"));
    }
    let seg = n / areas;
    for a in 0..areas {
        let span = a * seg * d..(a + 1) * seg * d;
        let (qs, ks, vs) = (&q[span.clone()], &k[span.clone()], &v[span.clone()]);
        let os = &mut out[span];
        match kernel {
            Kernel::Naive => naive_rows(qs, ks, vs, seg, d, os, stats),
            Kernel::Tiled => tiled_rows(qs, ks, vs, seg, d, cfg.tile_rows, cfg.tile_cols, os, stats),
        }
    }
    Ok(())
}

/// Gradients of area attention w.r.t. `q`, `k`, `v` (recomputes each area's
/// probabilities; nothing from the forward pass is kept).
#[allow(clippy::too_many_arguments)]
pub(crate) fn area_attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    areas: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let seg = n / areas;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut p = vec![T::zero(); seg * seg];
    let mut dp = vec![T::zero(); seg * seg];
    for a in 0..areas {
        let span = a * seg * d..(a + 1) * seg * d;
        let (qs, ks, vs, gs) = (&q[span.clone()], &k[span.clone()], &v[span.clone()], &dout[span.clone()]);
        gemm(seg, d, seg, qs, false, ks, true, T::zero(), &mut p);
        for row in p.chunks_mut(seg) {
            let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s * scale));
            let mut total = T::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total = total + *s;
            }
            for s in row.iter_mut() {
                *s = *s / total;
            }
        }
        // dV = Pᵀ dO
        gemm(seg, seg, d, &p, true, gs, false, T::one(), &mut dv[span.clone()]);
        // dP = dO Vᵀ ; dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
        gemm(seg, d, seg, gs, false, vs, true, T::zero(), &mut dp);
        for i in 0..seg {
            let (pr, dr) = (&p[i * seg..(i + 1) * seg], &mut dp[i * seg..(i + 1) * seg]);
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        gemm(seg, seg, d, &dp, false, ks, false, T::one(), &mut dq[span.clone()]);
        gemm(seg, seg, d, &dp, true, qs, false, T::one(), &mut dk[span]);
    }
}

/// Analytic cost of area attention on one head: `4·n²·d / L` FLOPs and a naive
/// peak scratch of `(n/L)²` elements.
pub fn attention_cost(n: usize, d: usize, areas: usize) -> Result<CostReport> {
    if areas == 0 || n % areas != 0 {
        return Err(cfg_err!("token count {n} is not divisible by num_areas {areas}"));
    }
    let seg = (n / areas) as u64;
    Ok(CostReport { flops: 4 * (n as u64) * (n as u64) * d as u64 / areas as u64, peak_scratch_elements: seg * seg, wall_ns: None })
}

/// Scratch bound of the tiled kernel: `Br·Bc + 3·Br + Br·d` with tiles clamped to `n`.
pub fn tiled_scratch_bound(n: usize, d: usize, tile_rows: usize, tile_cols: usize) -> usize {
    let br = tile_rows.clamp(1, n);
    let bc = tile_cols.clamp(1, n);
    br * bc + 3 * br + br * d
}

/// Applies area attention independently to each head of `[n, heads·d]` matrices.
pub fn multi_head_area_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &AttentionConfig,
    kernel: Kernel,
) -> Result<Tensor<T>> {
    let (n, width) = check_qkv(q, k, v)?;
    if width != cfg.num_heads * cfg.head_dim {
        return Err(dim_err!("expected width {}·{}, got {width}", cfg.num_heads, cfg.head_dim));
    }
    let d = cfg.head_dim;
    let gather = |t: &Tensor<T>, h: usize| -> Vec<T> {
        (0..n).flat_map(|i| t.data()[i * width + h * d..i * width + (h + 1) * d].iter().copied()).collect()
    };
    let stats = KernelStats::new();
    let mut out = vec![T::zero(); n * width];
    let mut head_out = vec![T::zero(); n * d];
    for h in 0..cfg.num_heads {
        area_attention_slices(&gather(q, h), &gather(k, h), &gather(v, h), n, d, cfg, kernel, &mut head_out, &stats)?;
        for i in 0..n {
            out[i * width + h * d..i * width + (h + 1) * d].copy_from_slice(&head_out[i * d..(i + 1) * d]);
        }
    }
    Tensor::new(&[n, width], out)
}
