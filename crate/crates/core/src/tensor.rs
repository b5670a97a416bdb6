//! Dense row-major tensors and the handful of kernels everything else is
//! built from: matrix products, strided 2-D convolution and its adjoints.
//!
//! Kernels are generic over the element type so gradient checks can run in
//! `f64` while training runs in `f32`.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, CoreResult};

/// Element type for all numeric code in this crate.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// Uniform draw from the half-open interval `[lo, hi)`.
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        lo + (hi - lo) * rng.random::<f32>()
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

/// Dense row-major tensor. Rank 1–4 in practice.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::standard_normal(rng) * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of rows when viewed as `[rows, ...]`; 0-dim tensors have none.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Flattened length of everything but the leading dimension.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            0
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows by index into a new tensor with the same trailing dims.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn check_shape(&self, expected: &[usize]) -> CoreResult<()> {
        if self.shape != expected {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{expected:?}"),
                got: format!("{:?}", self.shape),
            });
        }
        Ok(())
    }

    /// Converts element type (used when persisting f32 checkpoints from f64
    /// test models and vice versa).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`, row-major.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == T::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += ail * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T` (dot-product form). Eight independent
/// accumulator lanes keep the reduction vectorizable.
pub fn matmul_abt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut lanes = [T::zero(); 8];
            let mut ach = arow.chunks_exact(8);
            let mut bch = brow.chunks_exact(8);
            for (ac, bc) in (&mut ach).zip(&mut bch) {
                for u in 0..8 {
                    lanes[u] += ac[u] * bc[u];
                }
            }
            let mut tail = T::zero();
            for (&av, &bv) in ach.remainder().iter().zip(bch.remainder()) {
                tail += av * bv;
            }
            *cv += tail
                + ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
                + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]` (outer-product accumulation over k).
pub fn matmul_atb_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &ali) in arow.iter().enumerate() {
            if ali == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += ali * bv;
            }
        }
    }
}

/// Geometry of one convolution: kernel, stride and (possibly asymmetric)
/// zero padding. Output size is `(in + pad_lo + pad_hi - kernel)/stride + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvSpec {
    pub fn out_dim(&self, in_dim: usize) -> usize {
        (in_dim + self.pad_lo + self.pad_hi - self.kernel) / self.stride + 1
    }

    /// Input size reproduced by the adjoint (transposed) convolution.
    pub fn transposed_out_dim(&self, in_dim: usize) -> usize {
        (in_dim - 1) * self.stride + self.kernel - self.pad_lo - self.pad_hi
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Unrolls one sample `[C,H,W]` into a `[C*K*K, Ho*Wo]` column matrix.
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, spec: &ConvSpec, col: &mut [T]) {
    let (ho, wo) = (spec.out_dim(h), spec.out_dim(w));
    let k = spec.kernel;
    debug_assert_eq!(col.len(), spec.col_rows() * ho * wo);
    for v in col.iter_mut() {
        *v = T::zero();
    }
    for c in 0..spec.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let out = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad_lo as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let dst = &mut out[oi * wo..(oi + 1) * wo];
                    for oj in 0..wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad_lo as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        dst[oj] = src[jj as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto `[C,H,W]`.
fn col2im_acc<T: Scalar>(col: &[T], h: usize, w: usize, spec: &ConvSpec, x: &mut [T]) {
    let (ho, wo) = (spec.out_dim(h), spec.out_dim(w));
    let k = spec.kernel;
    for c in 0..spec.in_ch {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad_lo as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad_lo as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        dst[jj as usize] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `[n,C,H,W] -> [n,F,Ho,Wo]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Tensor<T> {
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    assert_eq!(x.shape()[1], spec.in_ch, "conv2d input channels");
    assert_eq!(weight.shape(), spec.weight_shape(), "conv2d weight shape");
    let (ho, wo) = (spec.out_dim(h), spec.out_dim(w));
    let (ck, hw) = (spec.col_rows(), ho * wo);
    let mut col = vec![T::zero(); ck * hw];
    let mut y = Tensor::zeros(&[n, spec.out_ch, ho, wo]);
    let sample_in = spec.in_ch * h * w;
    let sample_out = spec.out_ch * hw;
    for i in 0..n {
        im2col(&x.data()[i * sample_in..(i + 1) * sample_in], h, w, spec, &mut col);
        matmul_acc(
            weight.data(),
            &col,
            &mut y.data_mut()[i * sample_out..(i + 1) * sample_out],
            spec.out_ch,
            ck,
            hw,
        );
    }
    y
}

/// Gradient of [`conv2d`] with respect to its input. Also serves as the
/// forward pass of the transposed convolution.
pub fn conv2d_grad_input<T: Scalar>(
    dy: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    in_hw: (usize, usize),
) -> Tensor<T> {
    let (h, w) = in_hw;
    let n = dy.shape()[0];
    let (ho, wo) = (spec.out_dim(h), spec.out_dim(w));
    assert_eq!(dy.shape(), [n, spec.out_ch, ho, wo], "conv2d_grad_input dy shape");
    let (ck, hw) = (spec.col_rows(), ho * wo);
    let mut col = vec![T::zero(); ck * hw];
    let mut dx = Tensor::zeros(&[n, spec.in_ch, h, w]);
    let sample_in = spec.in_ch * h * w;
    let sample_out = spec.out_ch * hw;
    for i in 0..n {
        for v in col.iter_mut() {
            *v = T::zero();
        }
        matmul_atb_acc(
            weight.data(),
            &dy.data()[i * sample_out..(i + 1) * sample_out],
            &mut col,
            ck,
            spec.out_ch,
            hw,
        );
        col2im_acc(&col, h, w, spec, &mut dx.data_mut()[i * sample_in..(i + 1) * sample_in]);
    }
    dx
}

/// Gradient of [`conv2d`] with respect to the weights.
pub fn conv2d_grad_weight<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
) -> Tensor<T> {
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (spec.out_dim(h), spec.out_dim(w));
    let (ck, hw) = (spec.col_rows(), ho * wo);
    let mut col = vec![T::zero(); ck * hw];
    let mut dw = Tensor::zeros(&spec.weight_shape());
    let sample_in = spec.in_ch * h * w;
    let sample_out = spec.out_ch * hw;
    for i in 0..n {
        im2col(&x.data()[i * sample_in..(i + 1) * sample_in], h, w, spec, &mut col);
        matmul_abt_acc(
            &dy.data()[i * sample_out..(i + 1) * sample_out],
            &col,
            dw.data_mut(),
            spec.out_ch,
            hw,
            ck,
        );
    }
    dw
}

/// Zero-pads the spatial dims of `[n,C,H,W]` symmetrically to `(h, w)`.
pub fn pad_spatial<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, hi, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h >= hi && w >= wi, "pad_spatial target smaller than input");
    if h == hi && w == wi {
        return x.clone();
    }
    let (oh, ow) = ((h - hi) / 2, (w - wi) / 2);
    let mut y = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            for r in 0..hi {
                let src = &x.data()[((i * c + ch) * hi + r) * wi..][..wi];
                let dst = &mut y.data_mut()[((i * c + ch) * h + r + oh) * w + ow..][..wi];
                dst.copy_from_slice(src);
            }
        }
    }
    y
}

/// Inverse of [`pad_spatial`]: center-crops the spatial dims to `(h, w)`.
pub fn crop_spatial<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, hi, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert!(h <= hi && w <= wi, "crop_spatial target larger than input");
    if h == hi && w == wi {
        return x.clone();
    }
    let (oh, ow) = ((hi - h) / 2, (wi - w) / 2);
    let mut y = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            for r in 0..h {
                let src = &x.data()[((i * c + ch) * hi + r + oh) * wi + ow..][..w];
                let dst = &mut y.data_mut()[((i * c + ch) * h + r) * w..][..w];
                dst.copy_from_slice(src);
            }
        }
    }
    y
}

impl<T: Scalar> Tensor<T> {
    /// Shape rendered for error messages.
    pub fn shape_string(&self) -> alloc::string::String {
        format!("{:?}", self.shape).to_string()
    }
}
