//! Dense row-major tensors over f32 or f64.
//!
//! Rank is 1..=4 and layout is always NCHW for rank-4 data. f32 is the working
//! precision for training and inference; the same code runs in f64 when
//! gradients are being verified against finite differences, so everything
//! numeric is generic over [`Scalar`].

use std::fmt::{Debug, Display};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floating-point element type. Implemented for `f32` and `f64` only.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Default + Debug + Display + Send + Sync + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE_TAG: u8;
    /// Bytes per element on disk.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn read_le(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);

    /// Largest representable value strictly below 1 (used to keep sigmoid
    /// output inside the open interval (0, 1) even when saturated).
    fn one_below() -> Self;
    /// Smallest positive normal value (open-interval lower clamp).
    fn tiny() -> Self;
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn one_below() -> Self {
        1.0 - f32::EPSILON / 2.0
    }
    fn tiny() -> Self {
        f32::MIN_POSITIVE
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn one_below() -> Self {
        1.0 - f64::EPSILON / 2.0
    }
    fn tiny() -> Self {
        f64::MIN_POSITIVE
    }
}

/// Shorthand for lifting an f64 constant into the working precision.
#[inline]
pub(crate) fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape(format!(
            "rank must be 1..={MAX_RANK}, got {:?}",
            shape
        )));
    }
    if let Some(_) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::InvalidShape(format!("zero dimension in {:?}", shape)));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::InvalidShape(format!("dimension product overflows: {:?}", shape)))
    })
}

impl<T: Scalar> Tensor<T> {
    /// Internal constructor for shapes the caller has already computed.
    /// Panics (debug) instead of erroring: kernel output geometry is derived,
    /// not user input.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!shape.is_empty() && shape.len() <= MAX_RANK);
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor<T>> {
        let n = checked_numel(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![T::zero(); n], requires_grad: false })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Tensor<T>> {
        let n = checked_numel(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false })
    }

    pub fn ones(shape: &[usize]) -> Result<Tensor<T>> {
        Self::full(shape, T::one())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} needs {n} elements, got {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    /// Uniform in [lo, hi).
    pub fn uniform(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Result<Tensor<T>> {
        let n = checked_numel(shape)?;
        let data = (0..n).map(|_| c(rng.uniform(lo, hi))).collect();
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    /// Normal(0, 2/fan_in) — the init that keeps ReLU activation variance flat
    /// across layers.
    pub fn kaiming_normal(shape: &[usize], rng: &mut Rng, fan_in: usize) -> Result<Tensor<T>> {
        if fan_in == 0 {
            return Err(Error::InvalidShape("kaiming fan_in must be positive".into()));
        }
        let n = checked_numel(shape)?;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..n).map(|_| c(rng.normal() * std)).collect();
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Tensor<T> {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// The (n, c, h, w) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch(format!("expected rank-4 NCHW, got {:?}", self.shape))),
        }
    }

    /// The (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!("expected rank-2, got {:?}", self.shape))),
        }
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Error if any element is NaN/Inf; `what` names the tensor for the message.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Largest |a - b| over all elements, in f64. Panics if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Cast element-wise into another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_fills_with_zero() {
        let t = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[0.0; 6]);
        assert!(!t.requires_grad());
    }

    #[test]
    fn zero_dimension_rejected() {
        let err = Tensor::<f32>::zeros(&[2, 0]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)), "got {err:?}");
    }

    #[test]
    fn rank_bounds_enforced() {
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1]).is_ok());
    }

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::InvalidShape(_)));
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.numel(), 4);
    }

    #[test]
    fn uniform_seed_reproducible_and_centered() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let ta = Tensor::<f32>::uniform(&[1000], &mut a, 0.0, 1.0).unwrap();
        let tb = Tensor::<f32>::uniform(&[1000], &mut b, 0.0, 1.0).unwrap();
        assert_eq!(ta.data(), tb.data(), "same seed must give bit-identical tensors");
        let mean: f64 = ta.data().iter().map(|&x| x as f64).sum::<f64>() / 1000.0;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
        assert!(ta.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn kaiming_std_matches_fan_in() {
        let mut rng = Rng::new(21);
        let fan_in = 9 * 16;
        let t = Tensor::<f64>::kaiming_normal(&[32, 16, 3, 3], &mut rng, fan_in).unwrap();
        let n = t.numel() as f64;
        let mean: f64 = t.data().iter().sum::<f64>() / n;
        let var: f64 = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let want = 2.0 / fan_in as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - want).abs() / want < 0.1, "var {var}, want {want}");
    }

    #[test]
    fn cast_round_trip_f32_exact() {
        let mut rng = Rng::new(4);
        let t = Tensor::<f32>::uniform(&[64], &mut rng, -1.0, 1.0).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t.data(), back.data(), "f32 -> f64 -> f32 must be lossless");
    }

    #[test]
    fn ensure_finite_catches_nan() {
        let mut t = Tensor::<f32>::zeros(&[3]).unwrap();
        t.data_mut()[1] = f32::NAN;
        assert!(matches!(t.ensure_finite("loss"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sigma_clamp_constants_are_strictly_inside_unit_interval() {
        assert!(f32::one_below() < 1.0 && f32::one_below() > 0.99);
        assert!(f64::one_below() < 1.0 && f64::one_below() > 0.999);
        assert!(f32::tiny() > 0.0);
        assert!(f64::tiny() > 0.0);
    }
}
