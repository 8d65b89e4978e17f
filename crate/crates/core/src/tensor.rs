//! Dense row-major tensors and the handful of kernels the models need.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

use std::fmt::Debug;

use num_traits::{Float, NumAssign};
use rand::Rng;

use crate::error::{Error, Result};

pub trait Scalar:
    Float + NumAssign + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("literal fits")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(gaussian(rng) * std)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::lit(x.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Box-Muller standard normal draw.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// A model's parameter collection, visited in a fixed canonical order.
///
/// The same type doubles as its own gradient container.
pub trait ParamSet<T: Scalar>: Clone {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(T::zero());
        }
        z
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    fn scale(&mut self, scale: T) {
        for (_, t) in self.named_mut() {
            t.data.iter_mut().for_each(|x| *x *= scale);
        }
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Raw little-endian bytes of every tensor in canonical order.
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.named() {
            for &x in &t.data {
                x.write_le(&mut out);
            }
        }
        out
    }
}

pub(crate) fn check_shape(what: &str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            expected: format!("{what} {expected:?}"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}

/// `out[n] = bias[n] + sum_k x[k] * w[k, n]` for a single row; `w` is `[x.len(), out.len()]`.
#[inline]
pub fn linear_row<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|o| *o = T::zero()),
    }
    for (k, &xk) in x.iter().enumerate() {
        if xk == T::zero() {
            continue;
        }
        let wrow = &w[k * n..(k + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xk * wv;
        }
    }
}

/// Row-wise [`linear_row`] over `rows` rows.
pub fn linear<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, in_dim: usize, out_dim: usize) -> Vec<T> {
    let rows = x.len() / in_dim;
    let mut out = vec![T::zero(); rows * out_dim];
    for r in 0..rows {
        linear_row(
            &x[r * in_dim..(r + 1) * in_dim],
            w,
            bias,
            &mut out[r * out_dim..(r + 1) * out_dim],
        );
    }
    out
}

/// Backward of [`linear`]: accumulates into `dw`/`db` and returns `dx`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    in_dim: usize,
    out_dim: usize,
) -> Vec<T> {
    let rows = x.len() / in_dim;
    let mut dx = vec![T::zero(); rows * in_dim];
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for k in 0..in_dim {
            let wrow = &w[k * out_dim..(k + 1) * out_dim];
            let mut acc = T::zero();
            for (&g, &wv) in dyr.iter().zip(wrow) {
                acc += g * wv;
            }
            dxr[k] = acc;
            let xk = xr[k];
            if xk != T::zero() {
                let dwrow = &mut dw[k * out_dim..(k + 1) * out_dim];
                for (d, &g) in dwrow.iter_mut().zip(dyr) {
                    *d += xk * g;
                }
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (d, &g) in db.iter_mut().zip(&dy[r * out_dim..(r + 1) * out_dim]) {
                *d += g;
            }
        }
    }
    dx
}

const LN_EPS: f64 = 1e-5;

/// Layer norm of one row; returns (mean, rstd) for the backward pass.
#[inline]
pub fn layer_norm_row<T: Scalar>(x: &[T], gain: &[T], bias: &[T], out: &mut [T]) -> (T, T) {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Backward of [`layer_norm_row`]; accumulates parameter grads, writes `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_row_backward<T: Scalar>(
    x: &[T],
    mean: T,
    rstd: T,
    gain: &[T],
    dy: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let n = x.len();
    let nf = T::lit(n as f64);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    for i in 0..n {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dx[i] = rstd * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// In-place numerically stable softmax.
#[inline]
pub fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = if *x == T::neg_infinity() { T::zero() } else { (*x - max).exp() };
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of a row, evaluated in f64 for scoring stability.
pub fn log_softmax_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    let max = v
        .iter()
        .map(|x| x.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = v
        .iter()
        .map(|x| {
            let x = x.to_f64_lossy();
            if x == f64::NEG_INFINITY {
                0.0
            } else {
                (x - max).exp()
            }
        })
        .sum::<f64>()
        .ln()
        + max;
    v.iter().map(|x| x.to_f64_lossy() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_naive_product() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [1.0, 0.5, -1.0, 2.0];
        let y = linear(&x, &w, Some(&[0.1, 0.2]), 2, 2);
        let expected = [-0.9, 4.7, -0.9, 9.7];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_handles_masked_entries() {
        let mut v = [1.0f32, f32::NEG_INFINITY, 3.0, -2.0];
        softmax_in_place(&mut v);
        assert_eq!(v[1], 0.0);
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
