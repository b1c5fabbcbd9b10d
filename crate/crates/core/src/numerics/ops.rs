//! Pure forward operations on [`Tensor`]s.
//!
//! Each function validates shapes, never mutates its inputs, and rejects a
//! non-finite result with [`Error::NonFinite`] naming the operation.

use super::kernels::{self, ConvGeom, NormLayout};
use super::{Scalar, Tensor};
use crate::{Error, Result};

pub(crate) fn finite<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op, stage: "forward" })
    }
}

fn dims3<T: Scalar>(op: &'static str, what: &str, t: &Tensor<T>) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::shape(op, format!("{what} must be rank 3, got {s:?}"))),
    }
}

fn kernel4<T: Scalar>(op: &'static str, w: &Tensor<T>) -> Result<[usize; 3]> {
    match *w.shape() {
        [a, b, k, k2] if k == k2 && k % 2 == 1 => Ok([a, b, k]),
        ref s => Err(Error::shape(op, format!("kernels must be [a × b × k × k] with odd k, got {s:?}"))),
    }
}

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [channels] => {
            Err(Error::shape(op, format!("bias {:?} for {channels} output channels", b.shape())))
        }
        _ => Ok(()),
    }
}

/// Geometry of `conv2d(x, w)`.
pub fn conv2d_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<ConvGeom> {
    let [cin, h, wd] = dims3("conv2d", "input", x)?;
    let [cout, kin, k] = kernel4("conv2d", w)?;
    if kin != cin {
        return Err(Error::shape("conv2d", format!("input has {cin} channels, kernels expect {kin}")));
    }
    Ok(ConvGeom { cin, cout, h, w: wd, k })
}

/// Same-padded, stride-1 cross-correlation summed over input channels.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let g = conv2d_geom(x, w)?;
    check_bias("conv2d", b, g.cout)?;
    let mut out = Tensor::zeros(&[g.cout, g.h, g.w]);
    kernels::conv2d_forward(g, x.data(), w.data(), b.map(|b| b.data()), out.data_mut());
    finite("conv2d", out)
}

/// Geometry of the convolution whose adjoint `transpose_conv2d(x, w)` is.
///
/// Kernels are `[C_in × C_out × k × k]`; the underlying convolution maps
/// `C_out → C_in`.
pub fn transpose_conv2d_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<ConvGeom> {
    let [c, h, wd] = dims3("transpose_conv2d", "input", x)?;
    let [kc, cout, k] = kernel4("transpose_conv2d", w)?;
    if kc != c {
        return Err(Error::shape(
            "transpose_conv2d",
            format!("input has {c} channels, kernels expect {kc}"),
        ));
    }
    Ok(ConvGeom { cin: cout, cout: c, h, w: wd, k })
}

/// Stride-1 transposed convolution: the exact adjoint of [`conv2d`] with the
/// same kernels, plus an optional bias on the output channels.
pub fn transpose_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = transpose_conv2d_geom(x, w)?;
    check_bias("transpose_conv2d", b, g.cin)?;
    let mut out = Tensor::zeros(&[g.cin, g.h, g.w]);
    kernels::conv2d_backward_input(g, x.data(), w.data(), out.data_mut());
    if let Some(b) = b {
        let plane = g.h * g.w;
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + b.data()[c]);
        }
    }
    finite("transpose_conv2d", out)
}

pub fn depthwise_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<ConvGeom> {
    let [c, h, wd] = dims3("depthwise_conv", "input", x)?;
    let k = match *w.shape() {
        [kc, k, k2] if kc == c && k == k2 && k % 2 == 1 => k,
        ref s => {
            return Err(Error::shape(
                "depthwise_conv",
                format!("kernels must be [{c} × k × k] with odd k, got {s:?}"),
            ))
        }
    };
    Ok(ConvGeom { cin: c, cout: c, h, w: wd, k })
}

/// One spatial kernel per channel; channels never mix.
pub fn depthwise_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let g = depthwise_geom(x, w)?;
    let mut out = Tensor::zeros(x.shape());
    kernels::depthwise_forward(g, x.data(), w.data(), out.data_mut());
    finite("depthwise_conv", out)
}

/// `(batch, m, n, p)` for `op(a) · op(b)`.
pub fn matmul_dims<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize, usize)> {
    let [ba, a0, a1] = dims3("matmul_batched", "lhs", a)?;
    let [bb, b0, b1] = dims3("matmul_batched", "rhs", b)?;
    let (m, n) = if ta { (a1, a0) } else { (a0, a1) };
    let (n2, p) = if tb { (b1, b0) } else { (b0, b1) };
    if ba != bb || n != n2 {
        return Err(Error::shape(
            "matmul_batched",
            format!("{:?} · {:?} (transpose {ta}/{tb})", a.shape(), b.shape()),
        ));
    }
    Ok((ba, m, n, p))
}

pub fn matmul_general<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (batch, m, n, p) = matmul_dims(a, b, ta, tb)?;
    let mut out = Tensor::zeros(&[batch, m, p]);
    kernels::bmm(a.data(), b.data(), out.data_mut(), m, n, p, ta, tb);
    finite("matmul_batched", out)
}

/// `[B × m × n] · [B × n × p] → [B × m × p]`.
pub fn matmul_batched<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_general(a, b, false, false)
}

/// `[B × m × n] · [B × p × n]ᵀ → [B × m × p]`.
pub fn matmul_batched_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_general(a, b, false, true)
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().last().ok_or_else(|| Error::shape("softmax_rows", "rank 0 input"))?;
    let mut out = Tensor::zeros(x.shape());
    if n > 0 {
        kernels::softmax_rows(x.data(), n, out.data_mut());
    }
    finite("softmax_rows", out)
}

/// Output of [`layer_norm`] together with the per-group statistics the
/// backward pass needs.
pub struct LayerNormOut<T> {
    pub out: Tensor<T>,
    pub layout: NormLayout,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalises over `axes` (sorted, distinct) to zero mean and unit variance,
/// then applies `gain` and `bias`, both shaped like the normalised extents.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    axes: &[usize],
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<LayerNormOut<T>> {
    let rank = x.shape().len();
    if axes.is_empty() || axes.windows(2).any(|w| w[0] >= w[1]) || axes.iter().any(|&a| a >= rank) {
        return Err(Error::shape("layer_norm", format!("axes {axes:?} invalid for rank {rank}")));
    }
    let extents: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    if gain.shape() != extents.as_slice() || bias.shape() != extents.as_slice() {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {:?} / bias {:?} must be {extents:?}", gain.shape(), bias.shape()),
        ));
    }
    if extents.iter().product::<usize>() == 0 {
        return Err(Error::shape("layer_norm", "zero-size normalisation span"));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let layout = NormLayout::new(x.shape(), axes);
    let mut out = Tensor::zeros(x.shape());
    let mut mean = vec![0.0; layout.groups];
    let mut rstd = vec![0.0; layout.groups];
    kernels::layer_norm_forward(
        &layout,
        x.data(),
        gain.data(),
        bias.data(),
        eps,
        out.data_mut(),
        &mut mean,
        &mut rstd,
    );
    Ok(LayerNormOut { out: finite("layer_norm", out)?, layout, mean, rstd })
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    finite(op, Tensor::from_vec(a.shape(), data)?)
}

fn map<T: Scalar>(op: &'static str, a: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    let data = a.data().iter().map(|x| f(*x)).collect();
    finite(op, Tensor::from_vec(a.shape(), data)?)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_map("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_map("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_map("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    map("scale", a, |x| x * c)
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    map("relu", a, |x| if x > T::zero() { x } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    map("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()))
}

/// `(outer, extent, inner)` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Contiguous sub-range `start..end` along `axis`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() || start >= end || end > x.shape()[axis] {
        return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {:?}", x.shape())));
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    Tensor::from_vec(&shape, data)
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
    }
    for x in xs {
        let ok = x.shape().len() == rank
            && x.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", x.shape(), first.shape())));
        }
    }
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let run = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * run..(o + 1) * run]);
        }
    }
    Tensor::from_vec(&shape, data)
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    finite("sum", Tensor::scalar(kernels::sum(x.data())))
}

pub fn sum_squares<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    finite("sum_squares", Tensor::scalar(kernels::dot(x.data(), x.data())))
}
