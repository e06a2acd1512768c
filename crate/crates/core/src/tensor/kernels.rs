//! Forward and backward kernels shared by [`Tensor`] and the autograd tape.

use super::{Element, Tensor};
use crate::error::{Result, StmError};

/// Strided read-only matrix view over a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, E> {
    pub data: &'a [E],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, E: Element> MatView<'a, E> {
    pub fn row_major(data: &'a [E], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatView {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> E {
        self.data[r * self.rs + c * self.cs]
    }
}

/// `out (m×n, row-major) {=, +=} a · b`.
///
/// The deterministic path accumulates every dot product in `f64` in
/// ascending index order; the default path uses a blocked SIMD kernel.
pub(crate) fn gemm_into<E: Element>(
    a: MatView<'_, E>,
    b: MatView<'_, E>,
    out: &mut [E],
    accumulate: bool,
    deterministic: bool,
) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner extents");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let max_a = (m - 1) * a.rs + k.saturating_sub(1) * a.cs;
    let max_b = k.saturating_sub(1) * b.rs + (n - 1) * b.cs;
    assert!(k == 0 || (max_a < a.data.len() && max_b < b.data.len()), "gemm view out of bounds");
    if k == 0 {
        if !accumulate {
            out.fill(E::zero());
        }
        return;
    }
    if deterministic {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a.at(i, p).as_f64() * b.at(p, j).as_f64();
                }
                let slot = &mut out[i * n + j];
                *slot = if accumulate {
                    E::of(slot.as_f64() + acc)
                } else {
                    E::of(acc)
                };
            }
        }
        return;
    }
    let beta = if accumulate { E::one() } else { E::zero() };
    // SAFETY: bounds of both views were checked above; `out` is a distinct
    // exclusive borrow of exactly m×n elements.
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>, deterministic: bool) -> Result<Tensor<E>> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(StmError::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![E::zero(); m * n];
    gemm_into(
        MatView::row_major(a.data(), m, k),
        MatView::row_major(b.data(), k, n),
        &mut out,
        false,
        deterministic,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis<E: Element>(x: &Tensor<E>, axis: usize, what: &str) -> Result<()> {
    if axis >= x.rank() {
        return Err(StmError::dim(format!(
            "{what}: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Max-subtracted softmax; exponentials and the normalizer are `f64`.
pub(crate) fn softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    check_axis(x, axis, "softmax")?;
    if !x.is_finite() {
        return Err(StmError::numeric("softmax input contains non-finite values"));
    }
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![E::zero(); src.len()];
    let mut exps = vec![0.0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = src[base];
            for j in 1..n {
                let v = src[base + j * inner];
                if v > max {
                    max = v;
                }
            }
            let max = max.as_f64();
            let mut total = 0.0f64;
            for (j, e) in exps.iter_mut().enumerate() {
                *e = (src[base + j * inner].as_f64() - max).exp();
                total += *e;
            }
            for (j, e) in exps.iter().enumerate() {
                out[base + j * inner] = E::of(e / total);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<E: Element>(y: &Tensor<E>, grad: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![E::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n)
                .map(|j| yd[base + j * inner].as_f64() * gd[base + j * inner].as_f64())
                .sum();
            for j in 0..n {
                let idx = base + j * inner;
                out[idx] = E::of(yd[idx].as_f64() * (gd[idx].as_f64() - dot));
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub(crate) fn conv_geometry<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    x.expect_rank(3, "conv2d input")?;
    weight.expect_rank(4, "conv2d weight")?;
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc != c_in {
        return Err(StmError::dim(format!(
            "conv2d: weight expects {wc} input channels, input has {c_in}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(StmError::dim(format!(
                "conv2d: bias shape {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
    }
    if stride == 0 {
        return Err(StmError::invalid("conv2d: stride must be at least 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(StmError::dim(format!(
            "conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad})"
        )));
    }
    Ok(ConvGeometry {
        c_in,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (w + 2 * pad - kw) / stride + 1,
    })
}

fn im2col<E: Element>(x: &[E], g: &ConvGeometry) -> Vec<E> {
    let (p, ow) = (g.out_len(), g.w_out);
    let mut cols = vec![E::zero(); g.patch_len() * p];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<E: Element>(cols: &[E], g: &ConvGeometry) -> Vec<E> {
    let (p, ow) = (g.out_len(), g.w_out);
    let mut x = vec![E::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the output and the unfolded patches (`None` for pointwise
/// convolutions, whose patch matrix is the input itself).
pub(crate) fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<E>, Option<Vec<E>>)> {
    let g = conv_geometry(x, weight, bias, stride, pad)?;
    let c_out = weight.shape()[0];
    let p = g.out_len();
    let cols = if g.is_pointwise() {
        None
    } else {
        Some(im2col(x.data(), &g))
    };
    let patches = cols.as_deref().unwrap_or(x.data());
    let mut out = vec![E::zero(); c_out * p];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * p..(o + 1) * p].fill(bv);
        }
    }
    gemm_into(
        MatView::row_major(weight.data(), c_out, g.patch_len()),
        MatView::row_major(patches, g.patch_len(), p),
        &mut out,
        bias.is_some(),
        false,
    );
    Ok((Tensor::from_parts(vec![c_out, g.h_out, g.w_out], out), cols))
}

pub(crate) struct ConvGrads<E> {
    pub input: Option<Tensor<E>>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub(crate) fn conv2d_backward<E: Element>(
    g: &ConvGeometry,
    x: &Tensor<E>,
    weight: &Tensor<E>,
    cols: Option<&[E]>,
    grad: &Tensor<E>,
    need_input: bool,
) -> ConvGrads<E> {
    let c_out = weight.shape()[0];
    let p = g.out_len();
    let k = g.patch_len();
    let patches = cols.unwrap_or(x.data());
    let gd = grad.data();

    let mut dw = vec![E::zero(); c_out * k];
    gemm_into(
        MatView::row_major(gd, c_out, p),
        MatView::row_major(patches, k, p).t(),
        &mut dw,
        false,
        false,
    );
    let db: Vec<E> = (0..c_out)
        .map(|o| E::of(gd[o * p..(o + 1) * p].iter().map(|v| v.as_f64()).sum()))
        .collect();

    let input = need_input.then(|| {
        let mut dcols = vec![E::zero(); k * p];
        gemm_into(
            MatView::row_major(weight.data(), c_out, k).t(),
            MatView::row_major(gd, c_out, p),
            &mut dcols,
            false,
            false,
        );
        let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, g) };
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    ConvGrads {
        input,
        weight: Tensor::from_parts(weight.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![c_out], db),
    }
}

pub(crate) fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| StmError::invalid("concat of an empty list"))?;
    check_axis(first, axis, "concat")?;
    for t in parts.iter().skip(1) {
        let same_rank = t.rank() == first.rank();
        let same_rest = same_rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !same_rest {
            return Err(StmError::dim(format!(
                "concat along axis {axis}: shapes {:?} and {:?} are incompatible",
                first.shape(),
                t.shape()
            )));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in parts {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice_axis<E: Element>(
    x: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    check_axis(x, axis, "slice")?;
    let (outer, n, inner) = split_axis(x.shape(), axis);
    if len == 0 || start + len > n {
        return Err(StmError::dim(format!(
            "slice [{start}, {}) out of range for extent {n}",
            start + len
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Writes `grad` into a zero tensor of `full_shape` at the slice position.
pub(crate) fn slice_backward<E: Element>(
    full_shape: &[usize],
    grad: &Tensor<E>,
    axis: usize,
    start: usize,
) -> Tensor<E> {
    let (outer, n, inner) = split_axis(full_shape, axis);
    let len = grad.shape()[axis];
    let mut out = vec![E::zero(); full_shape.iter().product()];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out[base..base + len * inner]
            .copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(full_shape.to_vec(), out)
}

pub(crate) fn permute<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Result<Tensor<E>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(StmError::dim(format!(
            "invalid permutation {perm:?} for shape {:?}",
            x.shape()
        )));
    }
    let src_shape = x.shape();
    let mut src_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        src_strides[d] = src_strides[d + 1] * src_shape[d + 1];
    }
    let shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let src = x.data();
    for _ in 0..total {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Source taps for one axis of an align-corners-false bilinear resize.
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn bilinear_taps(src: usize, factor: usize) -> Taps {
    let dst = src * factor;
    let mut taps = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let pos = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(pos - lo as f64);
    }
    taps
}

fn check_upsample<E: Element>(x: &Tensor<E>, factor: usize) -> Result<()> {
    x.expect_rank(3, "upsample_bilinear")?;
    if factor != 2 && factor != 4 {
        return Err(StmError::invalid(format!(
            "upsample factor must be 2 or 4, got {factor}"
        )));
    }
    Ok(())
}

pub(crate) fn upsample_bilinear<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    check_upsample(x, factor)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = plane[r0 + c0].as_f64() * (1.0 - fx) + plane[r0 + c1].as_f64() * fx;
                let bot = plane[r1 + c0].as_f64() * (1.0 - fx) + plane[r1 + c1].as_f64() * fx;
                out.push(E::of(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub(crate) fn upsample_bilinear_backward<E: Element>(
    in_shape: &[usize],
    grad: &Tensor<E>,
    factor: usize,
) -> Tensor<E> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let gd = grad.data();
    let mut acc = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let plane = &mut acc[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1, fy) = (ty.lo[oy] * w, ty.hi[oy] * w, ty.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let g = gd[(ch * oh + oy) * ow + ox].as_f64();
                plane[r0 + c0] += g * (1.0 - fy) * (1.0 - fx);
                plane[r0 + c1] += g * (1.0 - fy) * fx;
                plane[r1 + c0] += g * fy * (1.0 - fx);
                plane[r1 + c1] += g * fy * fx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), acc.into_iter().map(E::of).collect())
}

/// Mean negative log-likelihood of `labels` under softmax over axis 0.
/// Returns the loss and the per-element gradient of the loss w.r.t. logits.
pub(crate) fn cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[u32]) -> Result<(f64, Tensor<E>)> {
    if logits.rank() < 2 {
        return Err(StmError::dim(format!(
            "cross_entropy: logits need a class axis plus spatial axes, got {:?}",
            logits.shape()
        )));
    }
    let classes = logits.shape()[0];
    let n: usize = logits.shape()[1..].iter().product();
    if labels.len() != n {
        return Err(StmError::dim(format!(
            "cross_entropy: {} labels for {n} positions",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(StmError::invalid(format!(
            "cross_entropy: label {bad} outside [0, {classes})"
        )));
    }
    if !logits.is_finite() {
        return Err(StmError::numeric("cross_entropy: non-finite logits"));
    }
    let x = logits.data();
    let mut grad = vec![E::zero(); x.len()];
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        let max = (0..classes).map(|c| x[c * n + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..classes).map(|c| (x[c * n + i].as_f64() - max).exp()).sum();
        let log_z = max + z.ln();
        total += log_z - x[label as usize * n + i].as_f64();
        for c in 0..classes {
            let p = (x[c * n + i].as_f64() - log_z).exp();
            let target = if c == label as usize { 1.0 } else { 0.0 };
            grad[c * n + i] = E::of((p - target) * inv_n);
        }
    }
    Ok((
        total * inv_n,
        Tensor::from_parts(logits.shape().to_vec(), grad),
    ))
}

pub const AGGREGATE_EPS: f64 = 1e-5;

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < AGGREGATE_EPS {
        (AGGREGATE_EPS, false)
    } else if p > 1.0 - AGGREGATE_EPS {
        (1.0 - AGGREGATE_EPS, false)
    } else {
        (p, true)
    }
}

fn check_aggregate_inputs<E: Element>(probs: &[&Tensor<E>]) -> Result<()> {
    let first = probs
        .first()
        .ok_or_else(|| StmError::invalid("soft aggregation needs at least one object"))?;
    first.expect_rank(3, "soft aggregation input")?;
    if first.shape()[0] != 1 {
        return Err(StmError::dim(format!(
            "soft aggregation inputs must be 1xHxW, got {:?}",
            first.shape()
        )));
    }
    for p in probs.iter().skip(1) {
        first.expect_same_shape(p, "soft aggregation")?;
    }
    Ok(())
}

/// Per-pixel log-odds of the background (channel 0) and every object,
/// after clamping probabilities into `[eps, 1 - eps]`. The background
/// probability is the product of the object complements. A softmax over
/// channel 0 of the result is the normalized odds distribution.
pub(crate) fn aggregate_logits<E: Element>(probs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    check_aggregate_inputs(probs)?;
    let (h, w) = (probs[0].shape()[1], probs[0].shape()[2]);
    let n = h * w;
    let m = probs.len();
    let mut out = vec![E::zero(); (m + 1) * n];
    for i in 0..n {
        let mut bg = 1.0f64;
        for (k, p) in probs.iter().enumerate() {
            let (q, _) = clamp_prob(p.data()[i].as_f64());
            bg *= 1.0 - q;
            out[(k + 1) * n + i] = E::of((q / (1.0 - q)).ln());
        }
        let (q0, _) = clamp_prob(bg);
        out[i] = E::of((q0 / (1.0 - q0)).ln());
    }
    Ok(Tensor::from_parts(vec![m + 1, h, w], out))
}

pub(crate) fn aggregate_logits_backward<E: Element>(probs: &[&Tensor<E>], grad: &Tensor<E>) -> Vec<Tensor<E>> {
    let shape = probs[0].shape().to_vec();
    let n = shape[1] * shape[2];
    let m = probs.len();
    let gd = grad.data();
    let mut grads = vec![vec![E::zero(); n]; m];
    let mut q = vec![0.0f64; m];
    let mut inside = vec![false; m];
    for i in 0..n {
        let mut bg = 1.0f64;
        for k in 0..m {
            let (qk, ok) = clamp_prob(probs[k].data()[i].as_f64());
            q[k] = qk;
            inside[k] = ok;
            bg *= 1.0 - qk;
        }
        let (q0, bg_inside) = clamp_prob(bg);
        let g0 = gd[i].as_f64();
        let dl0_dbg = if bg_inside { 1.0 / (q0 * (1.0 - q0)) } else { 0.0 };
        for k in 0..m {
            if !inside[k] {
                continue;
            }
            let others: f64 = (0..m).filter(|&j| j != k).map(|j| 1.0 - q[j]).product();
            let own = gd[(k + 1) * n + i].as_f64() / (q[k] * (1.0 - q[k]));
            grads[k][i] = E::of(own - g0 * dl0_dbg * others);
        }
    }
    grads
        .into_iter()
        .map(|g| Tensor::from_parts(shape.clone(), g))
        .collect()
}
