//! Dense row-major tensors and the forward primitives used by every block.
//!
//! Layout is `N,C,H,W` for feature maps. All forward functions here are pure;
//! the taped versions in [`crate::autograd`] call into them.

use crate::error::{dim_err, Result};
#[cfg(test)]
use crate::error::Error;
use crate::scalar::{gemm, Real};
use rand::Rng;
use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data[..8]", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("shape {shape:?} has a zero-sized axis"));
        }
        if numel(shape) != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)], grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect(), grad: None }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.grad
            .as_ref()
            .map(|g| Tensor { shape: self.shape.clone(), data: g.clone(), grad: None })
    }

    pub fn grad_data(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient length must match data");
        }
        self.grad = grad;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other, "elementwise")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            grad: None,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of data (NaN-safe, sign-of-zero sensitive).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.f64().to_bits() == b.f64().to_bits())
    }
}

pub(crate) fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(dim_err!("{op}: shapes {:?} and {:?} differ", a.shape, b.shape));
    }
    Ok(())
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &str) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("{op}: axis {axis} out of range for rank-{} shape {shape:?}", shape.len()));
    }
    Ok(())
}

/// Matrix product over the last two axes; leading axes must match exactly.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_t(a, false, b, false)
}

/// Matrix product with optional transposition of either operand's last two axes.
pub fn matmul_t<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank() {
        return Err(dim_err!("matmul: ranks of {:?} and {:?} are not compatible", a.shape, b.shape));
    }
    let r = a.rank();
    if a.shape[..r - 2] != b.shape[..r - 2] {
        return Err(dim_err!("matmul: batch axes {:?} vs {:?}", &a.shape[..r - 2], &b.shape[..r - 2]));
    }
    let (m, ka) = if ta { (a.shape[r - 1], a.shape[r - 2]) } else { (a.shape[r - 2], a.shape[r - 1]) };
    let (kb, n) = if tb { (b.shape[r - 1], b.shape[r - 2]) } else { (b.shape[r - 2], b.shape[r - 1]) };
    if ka != kb {
        return Err(dim_err!("matmul: inner dimensions differ ({ka} vs {kb}) for {:?} @ {:?}", a.shape, b.shape));
    }
    let batch: usize = a.shape[..r - 2].iter().product();
    let mut shape = a.shape[..r - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            ka,
            n,
            &a.data[i * m * ka..(i + 1) * m * ka],
            ta,
            &b.data[i * ka * n..(i + 1) * ka * n],
            tb,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Tensor::new(&shape, out)
}

/// Swaps the last two axes.
pub fn transpose<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(dim_err!("transpose needs rank ≥ 2, got {:?}", x.shape));
    }
    let (rows, cols) = (x.shape[r - 2], x.shape[r - 1]);
    let batch = x.numel() / (rows * cols);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..batch {
        let src = &x.data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    let mut shape = x.shape.clone();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, out)
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(&x.shape, axis, "softmax")?;
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(out[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (out[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

/// Nearest-neighbour 2× upsampling of the last two axes.
pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(dim_err!("upsample_nearest2x expects N,C,H,W, got {:?}", x.shape));
    }
    let (h, w) = (x.shape[2], x.shape[3]);
    let planes = x.shape[0] * x.shape[1];
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[x.shape[0], x.shape[1], 2 * h, 2 * w], out)
}

/// 2×2 mean pooling with stride 2 (the adjoint-ish inverse of [`upsample_nearest2x`]).
pub fn downsample_mean2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0 {
        return Err(dim_err!("downsample_mean2x expects N,C,2H,2W, got {:?}", x.shape));
    }
    let (h, w) = (x.shape[2] / 2, x.shape[3] / 2);
    let planes = x.shape[0] * x.shape[1];
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &x.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let s = src[2 * y * 2 * w + 2 * xx]
                    + src[2 * y * 2 * w + 2 * xx + 1]
                    + src[(2 * y + 1) * 2 * w + 2 * xx]
                    + src[(2 * y + 1) * 2 * w + 2 * xx + 1];
                out[p * h * w + y * w + xx] = s * quarter;
            }
        }
    }
    Tensor::new(&[x.shape[0], x.shape[1], h, w], out)
}

pub fn concat<T: Real>(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors.first().ok_or_else(|| dim_err!("concat of an empty list"))?;
    check_axis(&first.shape, axis, "concat")?;
    for t in &tensors[1..] {
        let compatible = t.rank() == first.rank()
            && t.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(dim_err!(
                "concat on axis {axis}: shapes {:?} and {:?} are incompatible",
                first.shape,
                t.shape
            ));
        }
    }
    let (outer, _, inner) = split_axis(&first.shape, axis);
    let total: usize = tensors.iter().map(|t| t.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in tensors {
            let chunk = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Tensor::new(&shape, data)
}

/// The sub-tensor `[start, start + len)` along `axis`.
pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    check_axis(&x.shape, axis, "narrow")?;
    if len == 0 || start + len > x.shape[axis] {
        return Err(dim_err!("narrow: range {start}..{} exceeds axis {axis} of {:?}", start + len, x.shape));
    }
    let (outer, alen, inner) = split_axis(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * alen * inner + start * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

/// `y[n,c,..] = x[n,c,..] * scale[c] + bias[c]`.
pub fn channel_affine<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 || scale.shape != [x.shape[1]] || bias.shape != [x.shape[1]] {
        return Err(dim_err!(
            "channel_affine: x {:?} with scale {:?} / bias {:?} (expected [{}])",
            x.shape,
            scale.shape,
            bias.shape,
            x.shape.get(1).copied().unwrap_or(0)
        ));
    }
    let (outer, c, inner) = split_axis(&x.shape, 1);
    let mut out = x.data.clone();
    for o in 0..outer {
        for ch in 0..c {
            let (s, b) = (scale.data[ch], bias.data[ch]);
            for v in &mut out[(o * c + ch) * inner..(o * c + ch + 1) * inner] {
                *v = *v * s + b;
            }
        }
    }
    Tensor::new(&x.shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_must_match_data() {
        assert!(matches!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]), Err(Error::Dimension(_))));
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        assert_eq!(matmul(&a, &Tensor::identity(5)).unwrap(), a);
        let p = matmul(&t(&[1, 1], &[3.0]), &t(&[1, 1], &[4.0])).unwrap();
        assert_eq!(p.data(), &[12.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::uniform(&[7, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let mut want = vec![0f32; 21];
        for i in 0..7 {
            for j in 0..3 {
                for k in 0..5 {
                    want[i * 3 + j] += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
            }
        }
        assert!(got.max_abs_diff(&Tensor::new(&[7, 3], want).unwrap()) <= 1e-6);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn matmul_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::uniform(&[2, 4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[2, 5, 3], -1.0, 1.0, &mut rng);
        let direct = matmul_t(&a, false, &b, true).unwrap();
        let explicit = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert!(direct.max_abs_diff(&explicit) < 1e-12);
        assert_eq!(direct.shape(), &[2, 4, 5]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[4], &[2.5; 4]), 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let s = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax(&s, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let s = softmax(&Tensor::<f32>::new(&[3], vec![1000.0, 1000.0, -1000.0]).unwrap(), 0).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn silu_examples() {
        let s = silu(&t(&[3], &[0.0, 30.0, 1.0]));
        assert_eq!(s.data()[0], 0.0);
        assert!((s.data()[1] - 30.0).abs() < 1e-6);
        assert!((s.data()[2] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-6);
        assert!((s.data()[2] - 0.731_058_578_6).abs() < 1e-6);
    }

    #[test]
    fn upsample_example_and_inverse() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let u = upsample_nearest2x(&x).unwrap();
        let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        assert_eq!(u.data(), &want);
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert!(downsample_mean2x(&u).unwrap().max_abs_diff(&x) <= 1e-6);
        let c = upsample_nearest2x(&Tensor::<f64>::full(&[2, 3, 3, 5], 0.7)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::<f32>::from_fn(&[1, 2, 4, 4], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[1, 3, 4, 4], |i| -(i as f32));
        assert_eq!(concat(&[&a], 1).unwrap(), a);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 4, 4]);
        assert!(narrow(&c, 1, 0, 2).unwrap().bit_eq(&a));
        assert!(narrow(&c, 1, 2, 3).unwrap().bit_eq(&b));
        let err = concat(&[&a, &Tensor::zeros(&[1, 2, 3, 4])], 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 2, 3, 4]"), "{err}");
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..16), c in -50.0f64..50.0) {
            let x = Tensor::new(&[xs.len()], xs.clone()).unwrap();
            let a = softmax(&x, 0).unwrap();
            let b = softmax(&x.map(|v| v + c), 0).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-7);
            prop_assert!((a.sum() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, axis in 0usize..2, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::uniform(&[rows, cols], -30.0, 30.0, &mut rng);
            let s = softmax(&x, axis).unwrap();
            let (outer, len, inner) = split_axis(s.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let total: f32 = (0..len).map(|j| s.data()[o * len * inner + j * inner + i]).sum();
                    prop_assert!((total - 1.0).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn concat_then_narrow_roundtrip(sizes in prop::collection::vec(1usize..4, 1..4), axis in 0usize..3) {
            let mut parts = Vec::new();
            for (k, &s) in sizes.iter().enumerate() {
                let mut shape = vec![2, 3, 2];
                shape[axis] = s;
                parts.push(Tensor::<f32>::from_fn(&shape, |i| (k * 100 + i) as f32));
            }
            let refs: Vec<_> = parts.iter().collect();
            let c = concat(&refs, axis).unwrap();
            prop_assert_eq!(c.shape()[axis], sizes.iter().sum::<usize>());
            let mut start = 0;
            for p in &parts {
                prop_assert!(narrow(&c, axis, start, p.shape()[axis]).unwrap().bit_eq(p));
                start += p.shape()[axis];
            }
        }
    }
}
