//! One operation vocabulary, two execution strategies.
//!
//! Model code is written once against [`Backend`]. [`Eager`] evaluates on
//! plain [`Tensor`]s and drops intermediates as soon as they go out of scope
//! (used for inference and the full-size shape check); [`Graph`] records a
//! tape so the same code can be differentiated.
//!
//! [`Graph`]: crate::autodiff::Graph

use crate::error::{Error, Result};
use crate::tensor::{self, PoolKind, Tensor};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

pub trait Backend {
    type Value: Clone;

    fn constant(&self, t: Tensor) -> Self::Value;
    fn value(&self, v: &Self::Value) -> Tensor;
    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn transpose(&self, a: &Self::Value) -> Result<Self::Value>;

    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&self, a: &Self::Value, factor: f64) -> Self::Value;
    fn add_scalar(&self, a: &Self::Value, offset: f64) -> Self::Value;
    /// `a · s` where `s` is a single-element value.
    fn mul_scalar(&self, a: &Self::Value, s: &Self::Value) -> Result<Self::Value>;

    fn relu(&self, a: &Self::Value) -> Self::Value;
    fn sigmoid(&self, a: &Self::Value) -> Self::Value;
    fn exp(&self, a: &Self::Value) -> Self::Value;
    /// `ln(max(a, LOG_FLOOR))`.
    fn ln(&self, a: &Self::Value) -> Self::Value;
    fn sqrt(&self, a: &Self::Value) -> Self::Value;
    fn recip(&self, a: &Self::Value) -> Self::Value;
    fn clamp_min(&self, a: &Self::Value, floor: f64) -> Self::Value;

    fn softmax_rows(&self, a: &Self::Value) -> Result<Self::Value>;
    fn sum(&self, a: &Self::Value) -> Self::Value;
    fn mean_axis(&self, a: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn reshape(&self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value>;
    fn trace(&self, a: &Self::Value) -> Result<Self::Value>;

    fn conv2d(
        &self,
        x: &Self::Value,
        k: &Self::Value,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Value>;
    fn conv_transpose2d(
        &self,
        x: &Self::Value,
        k: &Self::Value,
        stride: usize,
        pad: usize,
    ) -> Result<Self::Value>;
    fn pool2d(
        &self,
        x: &Self::Value,
        kind: PoolKind,
        window: usize,
        stride: usize,
    ) -> Result<Self::Value>;
    fn upsample2x(&self, x: &Self::Value) -> Result<Self::Value>;
    fn channel_mul(&self, x: &Self::Value, s: &Self::Value) -> Result<Self::Value>;
    fn channel_add(&self, x: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn slice_channels(&self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;

    fn scalar(&self, v: f64) -> Self::Value {
        self.constant(Tensor::scalar(v))
    }

    /// A learnable input. Backends without gradients treat it as a constant.
    fn parameter(&self, t: Tensor) -> Self::Value {
        self.constant(t)
    }
}

/// Immediate evaluation without a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

fn require_scalar(s: &Tensor, op: &'static str) -> Result<f64> {
    if s.len() != 1 {
        return Err(Error::dim(op, s.shape(), &[1]));
    }
    Ok(s.item())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Backend for Eager {
    type Value = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }
    fn value(&self, v: &Tensor) -> Tensor {
        v.clone()
    }
    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::matmul(a, b)
    }
    fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        tensor::transpose(a)
    }
    fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "add", |x, y| x + y)
    }
    fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "sub", |x, y| x - y)
    }
    fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, "mul", |x, y| x * y)
    }
    fn scale(&self, a: &Tensor, factor: f64) -> Tensor {
        a.map(|v| v * factor)
    }
    fn add_scalar(&self, a: &Tensor, offset: f64) -> Tensor {
        a.map(|v| v + offset)
    }
    fn mul_scalar(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        let s = require_scalar(s, "mul_scalar")?;
        Ok(a.map(|v| v * s))
    }
    fn relu(&self, a: &Tensor) -> Tensor {
        a.map(|v| v.max(0.0))
    }
    fn sigmoid(&self, a: &Tensor) -> Tensor {
        a.map(sigmoid)
    }
    fn exp(&self, a: &Tensor) -> Tensor {
        a.map(f64::exp)
    }
    fn ln(&self, a: &Tensor) -> Tensor {
        a.map(|v| v.max(LOG_FLOOR).ln())
    }
    fn sqrt(&self, a: &Tensor) -> Tensor {
        a.map(f64::sqrt)
    }
    fn recip(&self, a: &Tensor) -> Tensor {
        a.map(|v| 1.0 / v)
    }
    fn clamp_min(&self, a: &Tensor, floor: f64) -> Tensor {
        a.map(|v| v.max(floor))
    }
    fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        tensor::softmax_rows(a)
    }
    fn sum(&self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }
    fn mean_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        tensor::mean_axis(a, axis)
    }
    fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        a.reshaped(shape)
    }
    fn trace(&self, a: &Tensor) -> Result<Tensor> {
        tensor::trace(a).map(Tensor::scalar)
    }
    fn conv2d(&self, x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        tensor::conv2d(x, k, stride, pad)
    }
    fn conv_transpose2d(
        &self,
        x: &Tensor,
        k: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        tensor::conv_transpose2d(x, k, stride, pad)
    }
    fn pool2d(&self, x: &Tensor, kind: PoolKind, window: usize, stride: usize) -> Result<Tensor> {
        tensor::pool2d(x, kind, window, stride)
    }
    fn upsample2x(&self, x: &Tensor) -> Result<Tensor> {
        tensor::upsample2x(x)
    }
    fn channel_mul(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        tensor::channel_mul(x, s)
    }
    fn channel_add(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::channel_add(x, b)
    }
    fn slice_channels(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        tensor::slice_channels(x, start, len)
    }
}

/// Pointwise operation selector mirroring the tape's elementwise vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Scale(ScaleBits),
    Relu,
    Sigmoid,
    Exp,
    Log,
}

/// `f64` carried bitwise so [`Elementwise`] stays `Eq`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleBits(u64);

impl ScaleBits {
    pub fn new(v: f64) -> Self {
        ScaleBits(v.to_bits())
    }
    pub fn get(self) -> f64 {
        f64::from_bits(self.0)
    }
}

/// Applies `kind` to `a` (and `b` for binary kinds).
pub fn elementwise<B: Backend>(
    b: &B,
    kind: Elementwise,
    a: &B::Value,
    rhs: Option<&B::Value>,
) -> Result<B::Value> {
    let missing = || Error::contract(format!("{kind:?} needs a second operand"));
    match kind {
        Elementwise::Add => b.add(a, rhs.ok_or_else(missing)?),
        Elementwise::Mul => b.mul(a, rhs.ok_or_else(missing)?),
        Elementwise::Scale(f) => Ok(b.scale(a, f.get())),
        Elementwise::Relu => Ok(b.relu(a)),
        Elementwise::Sigmoid => Ok(b.sigmoid(a)),
        Elementwise::Exp => Ok(b.exp(a)),
        Elementwise::Log => Ok(b.ln(a)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_closed_forms() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(Eager.relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Eager.sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
    }

    #[test]
    fn log_is_floored() {
        let v = Eager.ln(&Tensor::new(&[2], vec![0.0, -3.0]).unwrap());
        assert!(v.data().iter().all(|&x| x == LOG_FLOOR.ln()));
    }

    #[test]
    fn binary_shape_mismatch_is_dimension_error() {
        let err = Eager
            .add(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]))
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn elementwise_dispatch() {
        let x = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let y = elementwise(&Eager, Elementwise::Scale(ScaleBits::new(3.0)), &x, None).unwrap();
        assert_eq!(y.data(), &[3.0, -6.0]);
        assert!(elementwise(&Eager, Elementwise::Mul, &x, None).is_err());
    }
}
