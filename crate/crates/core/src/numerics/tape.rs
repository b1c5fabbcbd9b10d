use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::graph::{CustomOp, Graph};
use super::kernels::{self, ConvGeom, NormLayout};
use super::{ops, Scalar, Tensor};
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    TransposeConv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, dims: (usize, usize, usize) },
    Softmax { x: Var, n: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, layout: NormLayout, mean: Vec<f64>, rstd: Vec<f64> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum { x: Var },
    SumSquares { x: Var },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposeConv2d { .. } => "transpose_conv2d",
            Op::Depthwise { .. } => "depthwise_conv",
            Op::MatMul { .. } => "matmul_batched",
            Op::Softmax { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::SumSquares { .. } => "sum_squares",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::TransposeConv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Softmax { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Slice { x, .. }
            | Op::Sum { x }
            | Op::SumSquares { x } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records executed operations in topological order for reverse-mode
/// differentiation.
///
/// A value requires a gradient when it is a parameter or depends on one.
/// [`Tape::backward`] visits every recorded operation once, newest first,
/// and leaves `∂loss/∂value` in the gradient buffer of each such value.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    perturbation: Option<(&'static str, f64)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), perturbation: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. The tensor's own `requires_grad` flag decides whether
    /// it receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Test hook: scales the gradient flowing back through every operation
    /// named `op` by `factor`. Used to confirm that gradient checks catch a
    /// broken backward rule.
    #[doc(hidden)]
    pub fn perturb_backward(&mut self, op: &'static str, factor: f64) {
        self.perturbation = Some((op, factor));
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} was not recorded on this tape")));
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.idx].value)
    }

    /// Gradient left by the last [`Tape::backward`], if the value requires one.
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.value(v)?.grad())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut value = value;
        if !matches!(op, Op::Leaf) {
            let needs = op.inputs().iter().any(|v| self.nodes[v.idx].value.requires_grad());
            value.set_requires_grad(false);
            if needs {
                value.set_requires_grad(true);
            }
        }
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    fn t(&self, v: &Var) -> Result<&Tensor<T>> {
        self.value(*v)
    }

    /// Propagates `∂loss/∂·` to every recorded value that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)
            .map_err(|_| Error::Tape("backward called with a loss that has no recorded tape".into()))?;
        let root = &self.nodes[loss.idx].value;
        if root.numel() != 1 {
            return Err(Error::Tape(format!("backward needs a scalar loss, got shape {:?}", root.shape())));
        }
        if !root.requires_grad() {
            return Err(Error::Tape("loss does not depend on any tensor that requires a gradient".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::one()]);
        for i in (0..=loss.idx).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some((name, factor)) = self.perturbation {
                if name == node.op.name() {
                    let f = T::lit(factor);
                    g.iter_mut().for_each(|v| *v = *v * f);
                }
            }
            self.propagate(node, &g, &mut grads)?;
            for input in node.op.inputs() {
                if let Some(buf) = &grads[input.idx] {
                    if buf.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: node.op.name(), stage: "backward" });
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let numel = node.value.numel();
                if let Some(buf) = node.value.grad_mut() {
                    *buf = g.unwrap_or_else(|| vec![T::zero(); numel]);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Runs `f` on the gradient accumulator of `v` when `v` needs one.
        let with = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            let t = &nodes[v.idx].value;
            if t.requires_grad() {
                f(grads[v.idx].get_or_insert_with(|| vec![T::zero(); t.numel()]));
            }
        };
        let take = |grads: &mut [Option<Vec<T>>], v: Var| -> Option<Vec<T>> {
            let t = &nodes[v.idx].value;
            t.requires_grad().then(|| grads[v.idx].take().unwrap_or_else(|| vec![T::zero(); t.numel()]))
        };
        let val = |v: &Var| &nodes[v.idx].value;

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let plane = geom.h * geom.w;
                with(grads, *x, &mut |dx| kernels::conv2d_backward_input(*geom, g, val(w).data(), dx));
                with(grads, *w, &mut |dw| kernels::conv2d_backward_weight(*geom, g, val(x).data(), dw));
                if let Some(b) = b {
                    with(grads, *b, &mut |db| kernels::bias_backward(plane, g, db));
                }
            }
            Op::TransposeConv2d { x, w, b, geom } => {
                let plane = geom.h * geom.w;
                with(grads, *x, &mut |dx| {
                    let mut tmp = vec![T::zero(); dx.len()];
                    kernels::conv2d_forward(*geom, g, val(w).data(), None, &mut tmp);
                    add_into(dx, &tmp);
                });
                with(grads, *w, &mut |dw| kernels::conv2d_backward_weight(*geom, val(x).data(), g, dw));
                if let Some(b) = b {
                    with(grads, *b, &mut |db| kernels::bias_backward(plane, g, db));
                }
            }
            Op::Depthwise { x, w, geom } => {
                with(grads, *x, &mut |dx| kernels::depthwise_backward_input(*geom, g, val(w).data(), dx));
                with(grads, *w, &mut |dw| kernels::depthwise_backward_weight(*geom, g, val(x).data(), dw));
            }
            Op::MatMul { a, b, ta, tb, dims: (m, n, p) } => {
                let (m, n, p, ta, tb) = (*m, *n, *p, *ta, *tb);
                with(grads, *a, &mut |da| {
                    let mut tmp = vec![T::zero(); da.len()];
                    if ta {
                        kernels::bmm(val(b).data(), g, &mut tmp, n, p, m, tb, true);
                    } else {
                        kernels::bmm(g, val(b).data(), &mut tmp, m, p, n, false, !tb);
                    }
                    add_into(da, &tmp);
                });
                with(grads, *b, &mut |db| {
                    let mut tmp = vec![T::zero(); db.len()];
                    if tb {
                        kernels::bmm(g, val(a).data(), &mut tmp, p, m, n, true, ta);
                    } else {
                        kernels::bmm(val(a).data(), g, &mut tmp, n, m, p, !ta, false);
                    }
                    add_into(db, &tmp);
                });
            }
            Op::Softmax { x, n } => {
                with(grads, *x, &mut |dx| kernels::softmax_rows_backward(node.value.data(), g, *n, dx));
            }
            Op::LayerNorm { x, gain, bias, layout, mean, rstd } => {
                let mut dx = take(grads, *x);
                let mut dg = take(grads, *gain);
                let mut db = take(grads, *bias);
                kernels::layer_norm_backward(
                    layout,
                    val(x).data(),
                    val(gain).data(),
                    mean,
                    rstd,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, buf) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if buf.is_some() {
                        grads[v.idx] = buf;
                    }
                }
            }
            Op::Add { a, b } => {
                with(grads, *a, &mut |d| add_into(d, g));
                with(grads, *b, &mut |d| add_into(d, g));
            }
            Op::Sub { a, b } => {
                with(grads, *a, &mut |d| add_into(d, g));
                with(grads, *b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d = *d - *g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(a).data(), val(b).data());
                with(grads, *a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + *g * *y;
                    }
                });
                with(grads, *b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + *g * *x;
                    }
                });
            }
            Op::Scale { x, c } => with(grads, *x, &mut |d| kernels::axpy(d, *c, g)),
            Op::Relu { x } => {
                let y = node.value.data();
                with(grads, *x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        if *y > T::zero() {
                            *d = *d + *g;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                with(grads, *x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + *g * *y * (T::one() - *y);
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = ops::axis_split(val(x).shape(), *axis);
                let len = node.value.shape()[*axis];
                with(grads, *x, &mut |d| {
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        add_into(&mut d[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = ops::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for x in xs {
                    let len = val(x).shape()[*axis];
                    with(grads, *x, &mut |d| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum { x } => with(grads, *x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::SumSquares { x } => {
                let two_g = g[0] + g[0];
                with(grads, *x, &mut |d| kernels::axpy(d, two_g, val(x).data()));
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                let needs: Vec<bool> = tensors.iter().map(|t| t.requires_grad()).collect();
                let contributions = op.backward(&tensors, &node.value, g, &needs)?;
                for (v, c) in inputs.iter().zip(contributions) {
                    if let Some(c) = c {
                        if c.len() != val(v).numel() {
                            return Err(Error::Tape(format!("{}: gradient length mismatch", op.name())));
                        }
                        with(grads, *v, &mut |d| add_into(d, &c));
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Value = Var;

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.idx].value
    }

    fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.detached().with_grad())
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let bias = b.map(|b| self.t(b)).transpose()?;
        let geom = ops::conv2d_geom(self.t(x)?, self.t(w)?)?;
        let out = ops::conv2d(self.t(x)?, self.t(w)?, bias)?;
        Ok(self.push(out, Op::Conv2d { x: *x, w: *w, b: b.copied(), geom }))
    }

    fn transpose_conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let bias = b.map(|b| self.t(b)).transpose()?;
        let geom = ops::transpose_conv2d_geom(self.t(x)?, self.t(w)?)?;
        let out = ops::transpose_conv2d(self.t(x)?, self.t(w)?, bias)?;
        Ok(self.push(out, Op::TransposeConv2d { x: *x, w: *w, b: b.copied(), geom }))
    }

    fn depthwise_conv(&mut self, x: &Var, w: &Var) -> Result<Var> {
        let geom = ops::depthwise_geom(self.t(x)?, self.t(w)?)?;
        let out = ops::depthwise_conv(self.t(x)?, self.t(w)?)?;
        Ok(self.push(out, Op::Depthwise { x: *x, w: *w, geom }))
    }

    fn matmul_batched(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (_, m, n, p) = ops::matmul_dims(self.t(a)?, self.t(b)?, false, false)?;
        let out = ops::matmul_batched(self.t(a)?, self.t(b)?)?;
        Ok(self.push(out, Op::MatMul { a: *a, b: *b, ta: false, tb: false, dims: (m, n, p) }))
    }

    fn matmul_batched_bt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (_, m, n, p) = ops::matmul_dims(self.t(a)?, self.t(b)?, false, true)?;
        let out = ops::matmul_batched_bt(self.t(a)?, self.t(b)?)?;
        Ok(self.push(out, Op::MatMul { a: *a, b: *b, ta: false, tb: true, dims: (m, n, p) }))
    }

    fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let out = ops::softmax_rows(self.t(x)?)?;
        let n = *out.shape().last().unwrap_or(&1);
        Ok(self.push(out, Op::Softmax { x: *x, n }))
    }

    fn layer_norm(&mut self, x: &Var, axes: &[usize], gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let r = ops::layer_norm(self.t(x)?, axes, self.t(gain)?, self.t(bias)?, eps)?;
        Ok(self.push(
            r.out,
            Op::LayerNorm { x: *x, gain: *gain, bias: *bias, layout: r.layout, mean: r.mean, rstd: r.rstd },
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::add(self.t(a)?, self.t(b)?)?;
        Ok(self.push(out, Op::Add { a: *a, b: *b }))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::sub(self.t(a)?, self.t(b)?)?;
        Ok(self.push(out, Op::Sub { a: *a, b: *b }))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = ops::mul(self.t(a)?, self.t(b)?)?;
        Ok(self.push(out, Op::Mul { a: *a, b: *b }))
    }

    fn scale(&mut self, x: &Var, c: T) -> Result<Var> {
        let out = ops::scale(self.t(x)?, c)?;
        Ok(self.push(out, Op::Scale { x: *x, c }))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        let out = ops::relu(self.t(x)?)?;
        Ok(self.push(out, Op::Relu { x: *x }))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let out = ops::sigmoid(self.t(x)?)?;
        Ok(self.push(out, Op::Sigmoid { x: *x }))
    }

    fn slice(&mut self, x: &Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = ops::slice(self.t(x)?, axis, start, end)?;
        Ok(self.push(out, Op::Slice { x: *x, axis, start }))
    }

    fn concat(&mut self, xs: &[&Var], axis: usize) -> Result<Var> {
        let tensors = xs.iter().map(|v| self.t(v)).collect::<Result<Vec<_>>>()?;
        let out = ops::concat(&tensors, axis)?;
        Ok(self.push(out, Op::Concat { xs: xs.iter().map(|v| **v).collect(), axis }))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let out = ops::sum(self.t(x)?)?;
        Ok(self.push(out, Op::Sum { x: *x }))
    }

    fn sum_squares(&mut self, x: &Var) -> Result<Var> {
        let out = ops::sum_squares(self.t(x)?)?;
        Ok(self.push(out, Op::SumSquares { x: *x }))
    }

    fn custom(&mut self, inputs: &[&Var], op: Arc<dyn CustomOp<T>>) -> Result<Var> {
        let tensors = inputs.iter().map(|v| self.t(v)).collect::<Result<Vec<_>>>()?;
        let out = ops::finite(op.name(), op.forward(&tensors)?)?;
        Ok(self.push(out, Op::Custom { inputs: inputs.iter().map(|v| **v).collect(), op }))
    }
}
