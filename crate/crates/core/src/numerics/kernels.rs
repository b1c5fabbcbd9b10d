//! Slice-level compute kernels shared by the forward and backward passes.
//!
//! All buffers are row-major. Convolutions use stride 1 and zero "same"
//! padding of `k / 2` on both spatial axes, so an odd kernel preserves the
//! spatial extents. Work is split over independent output channels (or batch
//! items) with rayon; every output element is reduced in a fixed order, so
//! results do not depend on the thread count.

use std::ops::Range;

use rayon::prelude::*;

use super::Scalar;

const LANES: usize = 16;

/// Dot product with independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            acc[i] = acc[i] + acc[i + width];
        }
    }
    let mut s = acc[0];
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

/// `out += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o = *o + alpha * *v;
    }
}

#[inline]
pub fn sum<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let rem = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] = acc[i] + c[i];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for v in rem {
        s = s + *v;
    }
    s
}

/// Geometry of a stride-1, same-padded 2-D convolution over `[C × H × W]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Output rows `t` whose input row `t + tap - pad` is in range.
    fn rows(&self, tap: usize) -> Range<usize> {
        valid_range(self.h, tap, self.pad())
    }

    /// Output columns for a tap, and the matching first input column.
    fn cols(&self, tap: usize) -> (Range<usize>, usize) {
        let r = valid_range(self.w, tap, self.pad());
        if r.is_empty() {
            return (0..0, 0);
        }
        let src = r.start + tap - self.pad();
        (r, src)
    }
}

fn valid_range(extent: usize, tap: usize, pad: usize) -> Range<usize> {
    let lo = pad.saturating_sub(tap);
    let hi = if tap > pad { extent.saturating_sub(tap - pad) } else { extent };
    lo..hi.max(lo)
}

/// `out[co] = bias[co] + Σ_ci weight[co, ci] ⋆ x[ci]`; weight is `[cout × cin × k × k]`.
pub fn conv2d_forward<T: Scalar>(
    g: ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let plane = g.plane();
    let k = g.k;
    out.par_chunks_mut(plane).enumerate().for_each(|(co, o)| {
        o.fill(bias.map_or(T::zero(), |b| b[co]));
        for ci in 0..g.cin {
            let xc = &x[ci * plane..(ci + 1) * plane];
            for kt in 0..k {
                let rows = g.rows(kt);
                for kf in 0..k {
                    let wv = weight[((co * g.cin + ci) * k + kt) * k + kf];
                    let (cols, src) = g.cols(kf);
                    let len = cols.len();
                    for t in rows.clone() {
                        let ti = t + kt - g.pad();
                        axpy(
                            &mut o[t * g.w + cols.start..t * g.w + cols.end],
                            wv,
                            &xc[ti * g.w + src..ti * g.w + src + len],
                        );
                    }
                }
            }
        }
    });
}

/// Accumulates the input-gradient (the adjoint of [`conv2d_forward`] without bias) into `dx`.
pub fn conv2d_backward_input<T: Scalar>(g: ConvGeom, dy: &[T], weight: &[T], dx: &mut [T]) {
    let plane = g.plane();
    let k = g.k;
    dx.par_chunks_mut(plane).enumerate().for_each(|(ci, dxc)| {
        for co in 0..g.cout {
            let dyc = &dy[co * plane..(co + 1) * plane];
            for kt in 0..k {
                let rows = g.rows(kt);
                for kf in 0..k {
                    let wv = weight[((co * g.cin + ci) * k + kt) * k + kf];
                    let (cols, src) = g.cols(kf);
                    let len = cols.len();
                    for t in rows.clone() {
                        let ti = t + kt - g.pad();
                        axpy(
                            &mut dxc[ti * g.w + src..ti * g.w + src + len],
                            wv,
                            &dyc[t * g.w + cols.start..t * g.w + cols.end],
                        );
                    }
                }
            }
        }
    });
}

/// Accumulates `∂/∂weight` of [`conv2d_forward`] into `dw`.
pub fn conv2d_backward_weight<T: Scalar>(g: ConvGeom, dy: &[T], x: &[T], dw: &mut [T]) {
    let plane = g.plane();
    let k = g.k;
    dw.par_chunks_mut(g.cin * k * k).enumerate().for_each(|(co, dwc)| {
        let dyc = &dy[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let xc = &x[ci * plane..(ci + 1) * plane];
            for kt in 0..k {
                let rows = g.rows(kt);
                for kf in 0..k {
                    let (cols, src) = g.cols(kf);
                    let len = cols.len();
                    let mut s = T::zero();
                    for t in rows.clone() {
                        let ti = t + kt - g.pad();
                        s = s + dot(
                            &dyc[t * g.w + cols.start..t * g.w + cols.end],
                            &xc[ti * g.w + src..ti * g.w + src + len],
                        );
                    }
                    let slot = &mut dwc[(ci * k + kt) * k + kf];
                    *slot = *slot + s;
                }
            }
        }
    });
}

/// Accumulates per-channel sums of `dy` into `db`.
pub fn bias_backward<T: Scalar>(plane: usize, dy: &[T], db: &mut [T]) {
    for (c, slot) in db.iter_mut().enumerate() {
        *slot = *slot + sum(&dy[c * plane..(c + 1) * plane]);
    }
}

/// Per-channel convolution; weight is `[c × k × k]` and `g.cin == g.cout`.
pub fn depthwise_forward<T: Scalar>(g: ConvGeom, x: &[T], weight: &[T], out: &mut [T]) {
    let single = ConvGeom { cin: 1, cout: 1, ..g };
    let plane = g.plane();
    let kk = g.k * g.k;
    out.par_chunks_mut(plane).enumerate().for_each(|(c, o)| {
        conv2d_forward(single, &x[c * plane..(c + 1) * plane], &weight[c * kk..(c + 1) * kk], None, o);
    });
}

pub fn depthwise_backward_input<T: Scalar>(g: ConvGeom, dy: &[T], weight: &[T], dx: &mut [T]) {
    let single = ConvGeom { cin: 1, cout: 1, ..g };
    let plane = g.plane();
    let kk = g.k * g.k;
    dx.par_chunks_mut(plane).enumerate().for_each(|(c, d)| {
        conv2d_backward_input(single, &dy[c * plane..(c + 1) * plane], &weight[c * kk..(c + 1) * kk], d);
    });
}

pub fn depthwise_backward_weight<T: Scalar>(g: ConvGeom, dy: &[T], x: &[T], dw: &mut [T]) {
    let single = ConvGeom { cin: 1, cout: 1, ..g };
    let plane = g.plane();
    let kk = g.k * g.k;
    dw.par_chunks_mut(kk).enumerate().for_each(|(c, d)| {
        conv2d_backward_weight(single, &dy[c * plane..(c + 1) * plane], &x[c * plane..(c + 1) * plane], d);
    });
}

/// Batched matrix product `out[b] = op(a[b]) · op(b[b])` with `op(a)` of
/// shape `m × n` and `op(b)` of shape `n × p`. With `ta` the stored `a` is
/// `n × m`; with `tb` the stored `b` is `p × n`. Overwrites `out`.
#[allow(clippy::too_many_arguments)]
pub fn bmm<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    n: usize,
    p: usize,
    ta: bool,
    tb: bool,
) {
    let (sa, sb, so) = (m * n, n * p, m * p);
    if so == 0 {
        return;
    }
    out.par_chunks_mut(so).enumerate().for_each(|(bi, o)| {
        let a = &a[bi * sa..(bi + 1) * sa];
        let b = &b[bi * sb..(bi + 1) * sb];
        match (ta, tb) {
            (false, false) => {
                for i in 0..m {
                    let row = &mut o[i * p..(i + 1) * p];
                    row.fill(T::zero());
                    for kk in 0..n {
                        axpy(row, a[i * n + kk], &b[kk * p..(kk + 1) * p]);
                    }
                }
            }
            (false, true) => {
                for i in 0..m {
                    for j in 0..p {
                        o[i * p + j] = dot(&a[i * n..(i + 1) * n], &b[j * n..(j + 1) * n]);
                    }
                }
            }
            (true, false) => {
                o.fill(T::zero());
                for kk in 0..n {
                    for i in 0..m {
                        axpy(&mut o[i * p..(i + 1) * p], a[kk * m + i], &b[kk * p..(kk + 1) * p]);
                    }
                }
            }
            (true, true) => {
                for i in 0..m {
                    for j in 0..p {
                        let mut s = T::zero();
                        for kk in 0..n {
                            s = s + a[kk * m + i] * b[j * n + kk];
                        }
                        o[i * p + j] = s;
                    }
                }
            }
        }
    });
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize, out: &mut [T]) {
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, v) in or.iter_mut().zip(xr) {
            *o = (*v - max).exp();
            total = total + *o;
        }
        let inv = T::one() / total;
        or.iter_mut().for_each(|o| *o = *o * inv);
    }
}

/// Accumulates `dx += y ⊙ (dy − ⟨dy, y⟩)` row by row.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], n: usize, dx: &mut [T]) {
    for ((yr, gr), dr) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let inner = dot(yr, gr);
        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = *d + *yv * (*gv - inner);
        }
    }
}

/// Index bookkeeping for normalisation over an arbitrary subset of axes.
///
/// Every element belongs to one *group* (its coordinates on the
/// non-normalised axes) and has one *parameter slot* (its coordinates on the
/// normalised axes, row-major), which indexes the gain and bias.
#[derive(Clone, Debug)]
pub struct NormLayout {
    shape: Vec<usize>,
    group_stride: Vec<usize>,
    param_stride: Vec<usize>,
    pub groups: usize,
    pub span: usize,
}

impl NormLayout {
    pub fn new(shape: &[usize], axes: &[usize]) -> Self {
        let rank = shape.len();
        let mut group_stride = vec![0; rank];
        let mut param_stride = vec![0; rank];
        let (mut gs, mut ps) = (1, 1);
        for a in (0..rank).rev() {
            if axes.contains(&a) {
                param_stride[a] = ps;
                ps *= shape[a];
            } else {
                group_stride[a] = gs;
                gs *= shape[a];
            }
        }
        Self { shape: shape.to_vec(), group_stride, param_stride, groups: gs, span: ps }
    }

    /// Visits `(flat_offset, len, group, param, last_axis_normalized)` for
    /// every contiguous run along the last axis.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, bool)) {
        let rank = self.shape.len();
        if rank == 0 {
            f(0, 1, 0, 0, true);
            return;
        }
        let last = rank - 1;
        let run = self.shape[last];
        let normalized_last = self.param_stride[last] > 0;
        let total: usize = self.shape.iter().product();
        if total == 0 {
            return;
        }
        let mut idx = vec![0usize; last];
        let (mut g, mut p) = (0usize, 0usize);
        let mut offset = 0;
        loop {
            f(offset, run, g, p, normalized_last);
            offset += run;
            if offset >= total {
                break;
            }
            let mut a = last;
            while a > 0 {
                a -= 1;
                idx[a] += 1;
                g += self.group_stride[a];
                p += self.param_stride[a];
                if idx[a] < self.shape[a] {
                    break;
                }
                g -= self.group_stride[a] * self.shape[a];
                p -= self.param_stride[a] * self.shape[a];
                idx[a] = 0;
            }
        }
    }
}

/// Layer normalisation forward. Writes `out` and per-group `mean` / `rstd`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_forward<T: Scalar>(
    layout: &NormLayout,
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: f64,
    out: &mut [T],
    mean: &mut [f64],
    rstd: &mut [f64],
) {
    let span = layout.span as f64;
    mean.fill(0.0);
    layout.for_each_run(|off, len, g, _, norm_last| {
        if norm_last {
            mean[g] += x[off..off + len].iter().map(|v| v.as_f64()).sum::<f64>();
        } else {
            for (i, v) in x[off..off + len].iter().enumerate() {
                mean[g + i] += v.as_f64();
            }
        }
    });
    mean.iter_mut().for_each(|m| *m /= span);
    let mut var = vec![0.0f64; mean.len()];
    layout.for_each_run(|off, len, g, _, norm_last| {
        if norm_last {
            let m = mean[g];
            var[g] += x[off..off + len].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        } else {
            for (i, v) in x[off..off + len].iter().enumerate() {
                var[g + i] += (v.as_f64() - mean[g + i]).powi(2);
            }
        }
    });
    for (r, v) in rstd.iter_mut().zip(&var) {
        *r = 1.0 / (v / span + eps).sqrt();
    }
    layout.for_each_run(|off, len, g, p, norm_last| {
        for i in 0..len {
            let (gi, pi) = if norm_last { (g, p + i) } else { (g + i, p) };
            let xhat = T::lit((x[off + i].as_f64() - mean[gi]) * rstd[gi]);
            out[off + i] = xhat * gain[pi] + bias[pi];
        }
    });
}

/// Layer normalisation backward; accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    layout: &NormLayout,
    x: &[T],
    gain: &[T],
    mean: &[f64],
    rstd: &[f64],
    dy: &[T],
    dx: Option<&mut [T]>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let span = layout.span as f64;
    let xhat = |gi: usize, v: T| (v.as_f64() - mean[gi]) * rstd[gi];
    if let Some(dgain) = dgain {
        layout.for_each_run(|off, len, g, p, norm_last| {
            for i in 0..len {
                let (gi, pi) = if norm_last { (g, p + i) } else { (g + i, p) };
                dgain[pi] = dgain[pi] + dy[off + i] * T::lit(xhat(gi, x[off + i]));
            }
        });
    }
    if let Some(dbias) = dbias {
        layout.for_each_run(|off, len, _, p, norm_last| {
            for i in 0..len {
                let pi = if norm_last { p + i } else { p };
                dbias[pi] = dbias[pi] + dy[off + i];
            }
        });
    }
    if let Some(dx) = dx {
        let mut s1 = vec![0.0f64; layout.groups];
        let mut s2 = vec![0.0f64; layout.groups];
        layout.for_each_run(|off, len, g, p, norm_last| {
            for i in 0..len {
                let (gi, pi) = if norm_last { (g, p + i) } else { (g + i, p) };
                let dh = (dy[off + i] * gain[pi]).as_f64();
                s1[gi] += dh;
                s2[gi] += dh * xhat(gi, x[off + i]);
            }
        });
        layout.for_each_run(|off, len, g, p, norm_last| {
            for i in 0..len {
                let (gi, pi) = if norm_last { (g, p + i) } else { (g + i, p) };
                let dh = (dy[off + i] * gain[pi]).as_f64();
                let v = rstd[gi] * (dh - s1[gi] / span - xhat(gi, x[off + i]) * s2[gi] / span);
                dx[off + i] = dx[off + i] + T::lit(v);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_and_sum_handle_remainders() {
        let a: Vec<f64> = (0..37).map(|i| i as f64).collect();
        let b = vec![2.0; 37];
        assert_eq!(dot(&a, &b), 2.0 * (0..37).sum::<i32>() as f64);
        assert_eq!(sum(&a), 666.0);
    }

    #[test]
    fn valid_range_clips_taps() {
        assert_eq!(valid_range(5, 0, 1), 1..5);
        assert_eq!(valid_range(5, 1, 1), 0..5);
        assert_eq!(valid_range(5, 2, 1), 0..4);
        assert_eq!(valid_range(1, 2, 1), 0..0);
    }

    #[test]
    fn norm_layout_groups_middle_axis() {
        let l = NormLayout::new(&[2, 3, 4], &[0, 2]);
        assert_eq!((l.groups, l.span), (3, 8));
        let mut runs = Vec::new();
        l.for_each_run(|off, len, g, p, n| runs.push((off, len, g, p, n)));
        assert_eq!(runs[0], (0, 4, 0, 0, true));
        assert_eq!(runs[1], (4, 4, 1, 0, true));
        assert_eq!(runs[3], (12, 4, 0, 4, true));
    }

    #[test]
    fn norm_layout_unnormalized_last_axis() {
        let l = NormLayout::new(&[3, 2], &[0]);
        assert_eq!((l.groups, l.span), (2, 3));
        let mut runs = Vec::new();
        l.for_each_run(|off, len, g, p, n| runs.push((off, len, g, p, n)));
        assert_eq!(runs, vec![(0, 2, 0, 0, false), (2, 2, 0, 1, false), (4, 2, 0, 2, false)]);
    }
}
