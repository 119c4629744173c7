//! 2-D convolution: im2col + GEMM for dense/grouped kernels, a direct loop for
//! depthwise kernels, and the matching backward passes.
//!
//! Work is split over the batch axis only. Weight gradients are reduced from
//! per-image partials in batch order so results do not depend on thread count.

use crate::error::{cfg_err, dim_err, Result};
use crate::scalar::{gemm, Real};
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(dim_err!("conv2d input must be N,C,H,W, got {x:?}"));
        }
        if weight.len() != 4 {
            return Err(dim_err!("conv2d weight must be C_out,C_in/groups,kH,kW, got {weight:?}"));
        }
        if stride == 0 || groups == 0 {
            return Err(cfg_err!("conv2d stride and groups must be positive (stride={stride}, groups={groups})"));
        }
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if cin % groups != 0 || cout % groups != 0 {
            return Err(cfg_err!("conv2d groups={groups} must divide C_in={cin} and C_out={cout}"));
        }
        if cin_g != cin / groups {
            return Err(dim_err!(
                "conv2d channel axis: weight expects {cin_g} input channels per group, input has {cin}/{groups}"
            ));
        }
        if kh > h + 2 * pad {
            return Err(dim_err!("conv2d height axis: kernel {kh} exceeds padded input {}", h + 2 * pad));
        }
        if kw > w + 2 * pad {
            return Err(dim_err!("conv2d width axis: kernel {kw} exceeds padded input {}", w + 2 * pad));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, cin, h, w, cout, kh, kw, stride, pad, groups, ho, wo })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Multiply-add FLOPs (×2) for one image.
    pub fn flops_per_image(&self) -> u64 {
        2 * (self.kh * self.kw * self.cin_g() * self.cout * self.ho * self.wo) as u64
    }
}

/// Unfolds one group of one image into a `(cin_g·kH·kW) × (H'·W')` matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], group: usize, cols: &mut [T]) {
    let plane = g.h * g.w;
    let npos = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let src = &img[(group * g.cin_g() + c) * plane..][..plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back into one group of an image gradient.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], group: usize, img: &mut [T]) {
    let plane = g.h * g.w;
    let npos = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let dst = &mut img[(group * g.cin_g() + c) * plane..][..plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] = drow[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn depthwise_forward<T: Real>(g: &ConvGeom, img: &[T], weight: &[T], out: &mut [T]) {
    let (plane, opl, ksz) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for c in 0..g.cin {
        let src = &img[c * plane..(c + 1) * plane];
        let k = &weight[c * ksz..(c + 1) * ksz];
        let dst = &mut out[c * opl..(c + 1) * opl];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc = acc + k[ky * g.kw + kx] * src[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                dst[oy * g.wo + ox] = acc;
            }
        }
    }
}

fn depthwise_backward<T: Real>(g: &ConvGeom, img: &[T], weight: &[T], dy: &[T], dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    let (plane, opl, ksz) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut dx = dx;
    let mut dw = dw;
    for c in 0..g.cin {
        let src = &img[c * plane..(c + 1) * plane];
        let k = &weight[c * ksz..(c + 1) * ksz];
        let gy = &dy[c * opl..(c + 1) * opl];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = gy[oy * g.wo + ox];
                if go == T::zero() {
                    continue;
                }
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let at = iy as usize * g.w + ix as usize;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * plane + at] = dx[c * plane + at] + k[ky * g.kw + kx] * go;
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let wi = c * ksz + ky * g.kw + kx;
                            dw[wi] = dw[wi] + src[at] * go;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of one image into `out` (length `C_out·H'·W'`).
fn forward_image<T: Real>(g: &ConvGeom, img: &[T], weight: &[T], out: &mut [T]) {
    if g.is_depthwise() {
        return depthwise_forward(g, img, weight, out);
    }
    let (cin_g, cout_g, k, npos) = (g.cin_g(), g.cout_g(), g.col_rows(), g.ho * g.wo);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * npos] };
    for grp in 0..g.groups {
        let w_g = &weight[grp * cout_g * k..(grp + 1) * cout_g * k];
        let o_g = &mut out[grp * cout_g * npos..(grp + 1) * cout_g * npos];
        if g.is_pointwise() {
            let x_g = &img[grp * cin_g * npos..(grp + 1) * cin_g * npos];
            gemm(cout_g, k, npos, w_g, false, x_g, false, T::zero(), o_g);
        } else {
            im2col(g, img, grp, &mut cols);
            gemm(cout_g, k, npos, w_g, false, &cols, false, T::zero(), o_g);
        }
    }
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(dim_err!("conv2d bias axis: expected [{}], got {:?}", g.cout, b.shape()));
        }
    }
    Ok(conv2d_raw(&g, input.data(), weight.data(), bias.map(|b| b.data())))
}

pub(crate) fn conv2d_raw<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Tensor<T> {
    let (img_len, out_len) = (g.cin * g.h * g.w, g.cout * g.ho * g.wo);
    let mut out = vec![T::zero(); g.n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(i, o)| {
        forward_image(g, &x[i * img_len..(i + 1) * img_len], weight, o);
        if let Some(b) = bias {
            let npos = g.ho * g.wo;
            for (c, &bc) in b.iter().enumerate() {
                o[c * npos..(c + 1) * npos].iter_mut().for_each(|v| *v = *v + bc);
            }
        }
    });
    Tensor::new(&g.out_shape(), out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (img_len, out_len) = (g.cin * g.h * g.w, g.cout * g.ho * g.wo);
    let (cin_g, cout_g, k, npos) = (g.cin_g(), g.cout_g(), g.col_rows(), g.ho * g.wo);

    let per_image: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|i| {
            let img = &x[i * img_len..(i + 1) * img_len];
            let gy = &dy[i * out_len..(i + 1) * out_len];
            let mut dx = if need_dx { vec![T::zero(); img_len] } else { Vec::new() };
            let mut dw = if need_dw { vec![T::zero(); weight.len()] } else { Vec::new() };
            if g.is_depthwise() {
                depthwise_backward(
                    g,
                    img,
                    weight,
                    gy,
                    need_dx.then_some(dx.as_mut_slice()),
                    need_dw.then_some(dw.as_mut_slice()),
                );
                return (dx, dw);
            }
            let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * npos }];
            for grp in 0..g.groups {
                let w_g = &weight[grp * cout_g * k..(grp + 1) * cout_g * k];
                let gy_g = &gy[grp * cout_g * npos..(grp + 1) * cout_g * npos];
                if need_dw {
                    let dw_g = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                    if g.is_pointwise() {
                        let x_g = &img[grp * cin_g * npos..(grp + 1) * cin_g * npos];
                        gemm(cout_g, npos, k, gy_g, false, x_g, true, T::zero(), dw_g);
                    } else {
                        im2col(g, img, grp, &mut cols);
                        gemm(cout_g, npos, k, gy_g, false, &cols, true, T::zero(), dw_g);
                    }
                }
                if need_dx {
                    if g.is_pointwise() {
                        let dx_g = &mut dx[grp * cin_g * npos..(grp + 1) * cin_g * npos];
                        gemm(k, cout_g, npos, w_g, true, gy_g, false, T::zero(), dx_g);
                    } else {
                        gemm(k, cout_g, npos, w_g, true, gy_g, false, T::zero(), &mut cols);
                        col2im(g, &cols, grp, &mut dx);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| per_image.iter().flat_map(|(d, _)| d.iter().copied()).collect());
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); weight.len()];
        for (_, d) in &per_image {
            acc.iter_mut().zip(d).for_each(|(a, &v)| *a = *a + v);
        }
        acc
    });
    let db = need_db.then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for i in 0..g.n {
            for (c, a) in acc.iter_mut().enumerate() {
                let s: T = dy[i * out_len + c * npos..i * out_len + (c + 1) * npos].iter().copied().sum();
                *a = *a + s;
            }
        }
        acc
    });
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six-nested-loop reference with explicit zero padding.
    fn reference<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, s: usize, p: usize, groups: usize) -> Tensor<T> {
        let [n, cin, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
        let [cout, cin_g, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let cout_g = cout / groups;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for b_ in 0..n {
            for co in 0..cout {
                let grp = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(T::zero(), |b| b.data()[co]);
                        for ci in 0..cin_g {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((b_ * cin + grp * cin_g + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((co * cin_g + ci) * kh + ky) * kw + kx;
                                    acc = acc + x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((b_ * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_is_scalar_multiply() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 0, 1).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::uniform(&[2, 1, 5, 6], -1.0, 1.0, &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        assert!(conv2d(&x, &w, None, 1, 1, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn random_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::uniform(&[1, 4, 8, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(&[6, 4, 3, 3], -1.0, 1.0, &mut rng);
        let got = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert!(got.max_abs_diff(&reference(&x, &w, None, 1, 0, 1)) <= 1e-5);
    }

    #[test]
    fn geometry_errors() {
        let x = Tensor::<f32>::zeros(&[1, 4, 5, 5]);
        let err = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), None, 1, 1, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[4, 3, 3, 3]), None, 1, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("channel")), "{err}");
        let err = conv2d(&x, &Tensor::zeros(&[4, 4, 9, 3]), None, 1, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("height")), "{err}");
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize, usize, u64)> {
        // n, groups, cin_g, cout_g, h, w, k, stride, pad, seed
        (1usize..3, 1usize..4, 1usize..3, 1usize..3, 3usize..9, 3usize..9, prop::sample::select(vec![1usize, 3, 5]), 1usize..3, 0usize..3, any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_oracle_and_shape_formula((n, groups, cin_g, cout_g, h, w, k, s, p, seed) in arb_case()) {
            prop_assume!(k <= h + 2 * p && k <= w + 2 * p);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform(&[n, groups * cin_g, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::<f64>::uniform(&[groups * cout_g, cin_g, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[groups * cout_g], -1.0, 1.0, &mut rng);
            let got = conv2d(&x, &wt, Some(&b), s, p, groups).unwrap();
            prop_assert_eq!(got.shape(), &[n, groups * cout_g, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1]);
            prop_assert!(got.max_abs_diff(&reference(&x, &wt, Some(&b), s, p, groups)) < 1e-12);
        }

        #[test]
        fn linear_in_input(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
            let y = Tensor::<f32>::uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::<f32>::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
            let mix = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
            let lhs = conv2d(&mix, &w, None, 1, 1, 1).unwrap();
            let rhs = conv2d(&x, &w, None, 1, 1, 1).unwrap()
                .zip_map(&conv2d(&y, &w, None, 1, 1, 1).unwrap(), |u, v| a * u + b * v).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
        }
    }
}
