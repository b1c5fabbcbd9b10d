use std::sync::Arc;

use super::{ops, Scalar, Tensor};
use crate::Result;

/// A differentiable operation defined outside this module.
///
/// `backward` returns one entry per input: `Some(gradient)` when
/// `needs[i]` is set, `None` otherwise.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

/// Execution context for forward computations.
///
/// Model code is generic over `Graph` so the same forward pass runs eagerly
/// (inference) or recorded on a [`super::Tape`] (training, gradient checks).
pub trait Graph<T: Scalar> {
    type Value;

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::Value;

    /// A trainable parameter; on a tape it receives a gradient.
    fn param(&mut self, t: &Tensor<T>) -> Self::Value;

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>) -> Result<Self::Value>;
    fn transpose_conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
    ) -> Result<Self::Value>;
    fn depthwise_conv(&mut self, x: &Self::Value, w: &Self::Value) -> Result<Self::Value>;
    fn matmul_batched(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn matmul_batched_bt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn softmax_rows(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        axes: &[usize],
        gain: &Self::Value,
        bias: &Self::Value,
        eps: f64,
    ) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, c: T) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn slice(&mut self, x: &Self::Value, axis: usize, start: usize, end: usize) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[&Self::Value], axis: usize) -> Result<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn sum_squares(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn custom(&mut self, inputs: &[&Self::Value], op: Arc<dyn CustomOp<T>>) -> Result<Self::Value>;
}

/// Immediate evaluation with no recording; intermediates are freed when dropped.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Value = Tensor<T>;

    fn tensor<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.detached()
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        ops::conv2d(x, w, b)
    }

    fn transpose_conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        ops::transpose_conv2d(x, w, b)
    }

    fn depthwise_conv(&mut self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        ops::depthwise_conv(x, w)
    }

    fn matmul_batched(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul_batched(a, b)
    }

    fn matmul_batched_bt(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::matmul_batched_bt(a, b)
    }

    fn softmax_rows(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::softmax_rows(x)
    }

    fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        axes: &[usize],
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        Ok(ops::layer_norm(x, axes, gain, bias, eps)?.out)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul(a, b)
    }

    fn scale(&mut self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        ops::scale(x, c)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::relu(x)
    }

    fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sigmoid(x)
    }

    fn slice(&mut self, x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        ops::slice(x, axis, start, end)
    }

    fn concat(&mut self, xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        ops::concat(xs, axis)
    }

    fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sum(x)
    }

    fn sum_squares(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sum_squares(x)
    }

    fn custom(&mut self, inputs: &[&Tensor<T>], op: Arc<dyn CustomOp<T>>) -> Result<Tensor<T>> {
        ops::finite(op.name(), op.forward(inputs)?)
    }
}
