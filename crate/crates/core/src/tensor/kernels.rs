//! Slice-level kernels shared by the tape operations.
//!
//! Everything here is a pure function of its inputs. Batch loops are spread
//! over rayon workers, but every reduction across the batch is summed in index
//! order afterwards so results do not depend on the thread count.

use rayon::prelude::*;

use super::{numel, strides};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub(crate) fn permute<T: Scalar>(
    shape: &[usize],
    data: &[T],
    perm: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(format!("invalid permutation {perm:?} for shape {shape:?}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, out))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// A transposed operand is stored with its dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
) {
    match (a_t, b_t) {
        (false, false) => {
            // four rows of b per pass over the output row
            let k4 = k - k % 4;
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for p in (0..k4).step_by(4) {
                    let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
                    let b0 = &b[p * n..(p + 1) * n];
                    let b1 = &b[(p + 1) * n..(p + 2) * n];
                    let b2 = &b[(p + 2) * n..(p + 3) * n];
                    let b3 = &b[(p + 3) * n..(p + 4) * n];
                    for j in 0..n {
                        crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                    }
                }
                for p in k4..k {
                    let av = arow[p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == T::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    c[i * n + j] += acc;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

/// Broadcast plan for batched matrix products `[.., m, k] x [.., k, n]`.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a batch offset, b batch offset) per output batch, in units of matrices.
    pub pairs: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim(format!("matmul needs rank >= 2 operands, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim(format!("matmul inner dimensions differ: {a:?} x {b:?}")));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let r = ab.len().max(bb.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(r);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::dim(format!(
                "matmul batch dimensions not broadcastable: {a:?} x {b:?}"
            )));
        }
        batch.push(x.max(y));
    }
    let sa = strides(&pa);
    let sb = strides(&pb);
    let nb = numel(&batch);
    let bst = strides(&batch);
    let pairs = (0..nb)
        .map(|ob| {
            let (mut oa, mut obb) = (0, 0);
            for ax in 0..r {
                let i = (ob / bst[ax]) % batch[ax];
                if pa[ax] != 1 {
                    oa += i * sa[ax];
                }
                if pb[ax] != 1 {
                    obb += i * sb[ax];
                }
            }
            (oa, obb)
        })
        .collect();
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
    })
}

pub(crate) fn matmul_forward<T: Scalar>(plan: &MatmulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![T::zero(); plan.pairs.len() * m * n];
    out.par_chunks_mut(m * n)
        .zip(plan.pairs.par_iter())
        .for_each(|(c, &(ia, ib))| {
            gemm(m, n, k, &a[ia * m * k..(ia + 1) * m * k], false, &b[ib * k * n..(ib + 1) * k * n], false, c);
        });
    out
}

pub(crate) fn matmul_backward<T: Scalar>(
    plan: &MatmulPlan,
    a: &[T],
    b: &[T],
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); a.len()];
        for (ob, &(ia, ib)) in plan.pairs.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &g[ob * m * n..(ob + 1) * m * n],
                false,
                &b[ib * k * n..(ib + 1) * k * n],
                true,
                &mut ga[ia * m * k..(ia + 1) * m * k],
            );
        }
        ga
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); b.len()];
        for (ob, &(ia, ib)) in plan.pairs.iter().enumerate() {
            gemm(
                k,
                n,
                m,
                &a[ia * m * k..(ia + 1) * m * k],
                true,
                &g[ob * m * n..(ob + 1) * m * n],
                false,
                &mut gb[ib * k * n..(ib + 1) * k * n],
            );
        }
        gb
    });
    (ga, gb)
}

/// Geometry of a 2-D convolution over `[B, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, depthwise: bool) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::dim(format!(
                "conv expects [B,C,H,W] input and 4-d kernel, got {x:?} and {w:?}"
            )));
        }
        let (cin, cw) = (x[1], w[1]);
        if depthwise {
            if w[0] != cin || cw != 1 {
                return Err(Error::dim(format!(
                    "depthwise kernel {w:?} does not match {cin} input channels (want [{cin},1,kh,kw])"
                )));
            }
        } else if cw != cin {
            return Err(Error::dim(format!(
                "conv kernel {w:?} expects {cw} input channels, input {x:?} has {cin}"
            )));
        }
        let ho = conv_out_dim(x[2], w[2], stride, pad);
        let wo = conv_out_dim(x[3], w[3], stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok(Self {
                batch: x[0],
                cin,
                h: x[2],
                w: x[3],
                cout: w[0],
                kh: w[2],
                kw: w[3],
                stride,
                pad,
                ho,
                wo,
            }),
            _ => Err(Error::dim(format!(
                "kernel {}x{} larger than padded input {}x{} (pad {pad}, stride {stride})",
                w[2],
                w[3],
                x[2] + 2 * pad,
                x[3] + 2 * pad
            ))),
        }
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            dst[oy * self.wo + ox] = match self.src(oy, ox, ky, kx) {
                                Some((iy, ix)) => x[(c * self.h + iy) * self.w + ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let hw = self.ho * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((iy, ix)) = self.src(oy, ox, ky, kx) {
                                gx[(c * self.h + iy) * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let hw = g.ho * g.wo;
    out.par_chunks_mut(g.out_sample())
        .enumerate()
        .for_each(|(b, ob)| {
            let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
            if g.is_pointwise() {
                gemm(g.cout, hw, g.cin, w, false, xb, false, ob);
            } else {
                let mut cols = vec![T::zero(); g.ckk() * hw];
                g.im2col(xb, &mut cols);
                gemm(g.cout, hw, g.ckk(), w, false, &cols, false, ob);
            }
        });
    out
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.ho * g.wo;
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
            let gb = &gout[b * g.out_sample()..(b + 1) * g.out_sample()];
            let pointwise = g.is_pointwise();
            let cols = if pointwise || !need_w {
                Vec::new()
            } else {
                let mut cols = vec![T::zero(); g.ckk() * hw];
                g.im2col(xb, &mut cols);
                cols
            };
            let mut gw = Vec::new();
            if need_w {
                gw = vec![T::zero(); w.len()];
                let src = if pointwise { xb } else { &cols[..] };
                gemm(g.cout, g.ckk(), hw, gb, false, src, true, &mut gw);
            }
            let mut gx = Vec::new();
            if need_x {
                gx = vec![T::zero(); g.in_sample()];
                if pointwise {
                    gemm(g.cin, hw, g.cout, w, true, gb, false, &mut gx);
                } else {
                    let mut gcols = vec![T::zero(); g.ckk() * hw];
                    gemm(g.ckk(), hw, g.cout, w, true, gb, false, &mut gcols);
                    g.col2im(&gcols, &mut gx);
                }
            }
            (gx, gw)
        })
        .collect();
    let gx = need_x.then(|| per_sample.iter().flat_map(|(gx, _)| gx.iter().copied()).collect());
    let gw = need_w.then(|| {
        let mut acc = vec![T::zero(); w.len()];
        for (_, gw) in &per_sample {
            acc.iter_mut().zip(gw).for_each(|(a, &v)| *a += v);
        }
        acc
    });
    (gx, gw)
}

pub(crate) fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let kk = g.kh * g.kw;
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    out.par_chunks_mut(g.out_sample())
        .enumerate()
        .for_each(|(b, ob)| {
            for c in 0..g.cin {
                let xc = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
                let wc = &w[c * kk..(c + 1) * kk];
                let oc = &mut ob[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = T::zero();
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                                    acc += wc[ky * g.kw + kx] * xc[iy * g.w + ix];
                                }
                            }
                        }
                        oc[oy * g.wo + ox] = acc;
                    }
                }
            }
        });
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let kk = g.kh * g.kw;
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let mut gx = vec![T::zero(); g.in_sample()];
            let mut gw = vec![T::zero(); w.len()];
            for c in 0..g.cin {
                let base = (b * g.cin + c) * g.h * g.w;
                let xc = &x[base..base + g.h * g.w];
                let wc = &w[c * kk..(c + 1) * kk];
                let go = &gout[(b * g.cin + c) * g.ho * g.wo..(b * g.cin + c + 1) * g.ho * g.wo];
                let gxc = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
                let gwc = &mut gw[c * kk..(c + 1) * kk];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let gv = go[oy * g.wo + ox];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                if let Some((iy, ix)) = g.src(oy, ox, ky, kx) {
                                    gwc[ky * g.kw + kx] += gv * xc[iy * g.w + ix];
                                    gxc[iy * g.w + ix] += gv * wc[ky * g.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    let mut gw = vec![T::zero(); w.len()];
    let mut gx = Vec::with_capacity(x.len());
    for (sx, sw) in per_sample {
        gx.extend(sx);
        gw.iter_mut().zip(&sw).for_each(|(a, &v)| *a += v);
    }
    (gx, gw)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Scalar>(shape: &[usize], axis: usize, x: &[T]) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                y[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(shape: &[usize], axis: usize, y: &[T], g: &[T]) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += g[at(j)] * y[at(j)];
            }
            for j in 0..len {
                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    gx
}

/// Tanh-form GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// Normalization statistics of one feature group.
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel batch statistics over `[B, C, rest..]` (biased variance).
pub(crate) fn channel_moments<T: Scalar>(shape: &[usize], x: &[T]) -> (Vec<T>, Vec<T>) {
    let (b, c, inner) = axis_split(shape, 1);
    let count = T::lit((b * inner) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            for v in &x[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                s += *v;
            }
        }
        let m = s / count;
        let mut q = T::zero();
        for bi in 0..b {
            for v in &x[(bi * c + ch) * inner..(bi * c + ch + 1) * inner] {
                q += (*v - m) * (*v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

pub(crate) fn channel_normalize<T: Scalar>(
    shape: &[usize],
    x: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> NormStats<T> {
    let (b, c, inner) = axis_split(shape, 1);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let r = (bi * c + ch) * inner..(bi * c + ch + 1) * inner;
            for (o, &v) in xhat[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - mean[ch]) * inv_std[ch];
            }
        }
    }
    NormStats { xhat, inv_std }
}

/// Layer normalization over the last axis.
pub(crate) fn row_normalize<T: Scalar>(shape: &[usize], x: &[T], eps: T) -> NormStats<T> {
    let d = *shape.last().expect("rank >= 1");
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    NormStats { xhat, inv_std }
}

/// Backward of `xhat = (x - mean(x)) * inv_std` given `gxhat`, for one group
/// of `n` elements addressed by `idx`.
pub(crate) fn norm_group_backward<T: Scalar>(
    idx: impl Iterator<Item = usize> + Clone,
    n: usize,
    xhat: &[T],
    gxhat: &[T],
    inv_std: T,
    gx: &mut [T],
) {
    let nn = T::lit(n as f64);
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    for i in idx.clone() {
        s1 += gxhat[i];
        s2 += gxhat[i] * xhat[i];
    }
    for i in idx {
        gx[i] += inv_std / nn * (nn * gxhat[i] - s1 - xhat[i] * s2);
    }
}

pub(crate) fn narrow<T: Scalar>(shape: &[usize], x: &[T], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, full, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

pub(crate) fn narrow_backward<T: Scalar>(
    shape: &[usize],
    g: &[T],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let (outer, full, inner) = axis_split(shape, axis);
    let mut gx = vec![T::zero(); numel(shape)];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    gx
}
