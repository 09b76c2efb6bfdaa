//! Raw slice kernels shared by the forward and backward passes.
//!
//! All kernels are single-threaded and iterate in a fixed order, so results
//! are bit-reproducible. Inner loops are written as `axpy` updates over
//! contiguous rows so they vectorize without reassociation.

use super::Element;
use crate::error::{shape_err, Result};

/// Stride/padding/groups of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// `floor((input + 2·padding − kernel) / stride) + 1`, or `None` when not positive.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[inline]
fn axpy<S: Element>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[m,p] += a[m,n] · b[n,p]`
pub(crate) fn gemm_nn<S: Element>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        let a_row = &a[i * n..(i + 1) * n];
        for (k, &av) in a_row.iter().enumerate() {
            if av != S::zero() {
                axpy(av, &b[k * p..(k + 1) * p], c_row);
            }
        }
    }
}

/// `c[m,p] += a[n,m]ᵀ · b[n,p]`
pub(crate) fn gemm_tn<S: Element>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, p: usize) {
    for k in 0..n {
        let a_row = &a[k * m..(k + 1) * m];
        let b_row = &b[k * p..(k + 1) * p];
        for (i, &av) in a_row.iter().enumerate() {
            if av != S::zero() {
                axpy(av, b_row, &mut c[i * p..(i + 1) * p]);
            }
        }
    }
}

/// Transposes a row-major `[rows, cols]` matrix.
pub(crate) fn transpose2<S: Element>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn permute<S: Element>(shape: &[usize], data: &[S], perm: &[usize]) -> Result<(Vec<usize>, Vec<S>)> {
    let nd = shape.len();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err!("invalid permutation {perm:?} for shape {shape:?}"));
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    // Innermost axis handled as a strided run.
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    for _ in 0..outer {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        for ax in (0..nd - 1).rev() {
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

/// Inverse of a permutation.
pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Batch layout of a broadcast matmul.
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub n: usize,
    pub p: usize,
    /// `(a_batch, b_batch)` index for every output batch entry.
    pub pairs: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err!("matmul needs rank >= 2 operands, got {a:?} and {b:?}"));
    }
    let (m, n) = (a[a.len() - 2], a[a.len() - 1]);
    let (n2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if n != n2 {
        return Err(shape_err!("matmul inner dimensions differ: {a:?} x {b:?}"));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let nd = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; nd - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(nd);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(shape_err!("matmul batch dimensions not broadcastable: {a:?} x {b:?}"));
        }
        batch.push(x.max(y));
    }
    let total: usize = batch.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        let (mut ia, mut ib) = (0usize, 0usize);
        for ax in 0..nd {
            ia = ia * pa[ax] + if pa[ax] == 1 { 0 } else { idx[ax] };
            ib = ib * pb[ax] + if pb[ax] == 1 { 0 } else { idx[ax] };
        }
        pairs.push((ia, ib));
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(p);
    Ok(MatmulPlan {
        out_shape,
        m,
        n,
        p,
        pairs,
    })
}

pub(crate) fn matmul_forward<S: Element>(plan: &MatmulPlan, a: &[S], b: &[S]) -> Vec<S> {
    let (m, n, p) = (plan.m, plan.n, plan.p);
    let mut out = vec![S::zero(); plan.pairs.len() * m * p];
    for (ob, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm_nn(
            &a[ia * m * n..(ia + 1) * m * n],
            &b[ib * n * p..(ib + 1) * n * p],
            &mut out[ob * m * p..(ob + 1) * m * p],
            m,
            n,
            p,
        );
    }
    out
}

/// Returns `(da, db)` with broadcast batches reduced back.
pub(crate) fn matmul_backward<S: Element>(
    plan: &MatmulPlan,
    a: &[S],
    b: &[S],
    g: &[S],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (m, n, p) = (plan.m, plan.n, plan.p);
    let mut da = want_a.then(|| vec![S::zero(); a.len()]);
    let mut db = want_b.then(|| vec![S::zero(); b.len()]);
    for (ob, &(ia, ib)) in plan.pairs.iter().enumerate() {
        let gs = &g[ob * m * p..(ob + 1) * m * p];
        let bs = &b[ib * n * p..(ib + 1) * n * p];
        let as_ = &a[ia * m * n..(ia + 1) * m * n];
        if let Some(da) = da.as_mut() {
            let bt = transpose2(bs, n, p);
            gemm_nn(gs, &bt, &mut da[ia * m * n..(ia + 1) * m * n], m, p, n);
        }
        if let Some(db) = db.as_mut() {
            gemm_tn(as_, gs, &mut db[ib * n * p..(ib + 1) * n * p], n, m, p);
        }
    }
    (da, db)
}

/// `out[rows, d] = x[rows, k] · w[d, k]ᵀ + bias[d]`
pub(crate) fn linear_forward<S: Element>(x: &[S], w: &[S], bias: Option<&[S]>, rows: usize, k: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * d];
    if let Some(bias) = bias {
        for row in out.chunks_mut(d) {
            row.copy_from_slice(bias);
        }
    }
    let wt = transpose2(w, d, k);
    gemm_nn(x, &wt, &mut out, rows, k, d);
    out
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(shape_err!("conv2d expects x [B,C,H,W] and w [O,C/g,kh,kw], got {x:?} and {w:?}"));
    }
    let g = spec.groups;
    if g == 0 || !x[1].is_multiple_of(g) || !w[0].is_multiple_of(g) {
        return Err(shape_err!("conv2d channels {} / out {} not divisible by groups {g}", x[1], w[0]));
    }
    if w[1] != x[1] / g {
        return Err(shape_err!("conv2d weight {w:?} does not match {} input channels with {g} groups", x[1]));
    }
    if spec.stride == 0 {
        return Err(shape_err!("conv2d stride must be positive"));
    }
    let oh = conv_output_size(x[2], w[2], spec.stride, spec.padding);
    let ow = conv_output_size(x[3], w[3], spec.stride, spec.padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(shape_err!(
            "conv2d output size not positive for input {:?}, kernel {}x{}, stride {}, padding {}",
            x,
            w[2],
            w[3],
            spec.stride,
            spec.padding
        ));
    };
    Ok(ConvGeom {
        batch: x[0],
        in_c: x[1],
        h: x[2],
        w: x[3],
        out_c: w[0],
        kh: w[2],
        kw: w[3],
        oh,
        ow,
        spec,
    })
}

/// Output positions `o` in `[start, end)` with `o·stride + k − pad` inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let start = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad < k + 1 {
        return (0, 0);
    }
    let end = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (start.min(end), end)
}

pub(crate) fn conv2d_forward<S: Element>(geo: &ConvGeom, x: &[S], w: &[S], bias: Option<&[S]>) -> Vec<S> {
    let ConvGeom {
        batch,
        in_c,
        h,
        w: wd,
        out_c,
        kh,
        kw,
        oh,
        ow,
        spec,
    } = *geo;
    let cin_g = in_c / spec.groups;
    let cout_g = out_c / spec.groups;
    let s = spec.stride;
    let mut out = vec![S::zero(); batch * out_c * oh * ow];
    for b in 0..batch {
        for o in 0..out_c {
            let plane = &mut out[(b * out_c + o) * oh * ow..(b * out_c + o + 1) * oh * ow];
            if let Some(bias) = bias {
                plane.fill(bias[o]);
            }
            let grp = o / cout_g;
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let xin = &x[(b * in_c + c) * h * wd..(b * in_c + c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ky, spec.padding, s, h, oh);
                    for kx in 0..kw {
                        let wv = w[((o * cin_g + ci) * kh + ky) * kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(kx, spec.padding, s, wd, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - spec.padding;
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            let xrow = &xin[iy * wd..(iy + 1) * wd];
                            if s == 1 {
                                let ix0 = ox0 + kx - spec.padding;
                                axpy(wv, &xrow[ix0..ix0 + (ox1 - ox0)], &mut orow[ox0..ox1]);
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * xrow[ox * s + kx - spec.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients for input, weight and bias, each only when requested.
type ConvGrads<S> = (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>);

pub(crate) fn conv2d_backward<S: Element>(
    geo: &ConvGeom,
    x: &[S],
    w: &[S],
    g: &[S],
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> ConvGrads<S> {
    let ConvGeom {
        batch,
        in_c,
        h,
        w: wd,
        out_c,
        kh,
        kw,
        oh,
        ow,
        spec,
    } = *geo;
    let cin_g = in_c / spec.groups;
    let cout_g = out_c / spec.groups;
    let s = spec.stride;
    let mut dx = want_x.then(|| vec![S::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![S::zero(); w.len()]);
    let mut db = want_b.then(|| vec![S::zero(); out_c]);
    for b in 0..batch {
        for o in 0..out_c {
            let gplane = &g[(b * out_c + o) * oh * ow..(b * out_c + o + 1) * oh * ow];
            if let Some(db) = db.as_mut() {
                db[o] += gplane.iter().copied().sum::<S>();
            }
            let grp = o / cout_g;
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let base = (b * in_c + c) * h * wd;
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ky, spec.padding, s, h, oh);
                    for kx in 0..kw {
                        let widx = ((o * cin_g + ci) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = valid_range(kx, spec.padding, s, wd, ow);
                        let mut acc = S::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - spec.padding;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let row_off = base + iy * wd;
                            if let Some(dx) = dx.as_mut() {
                                let dxrow = &mut dx[row_off..row_off + wd];
                                for ox in ox0..ox1 {
                                    dxrow[ox * s + kx - spec.padding] += wv * grow[ox];
                                }
                            }
                            if want_w {
                                let xrow = &x[row_off..row_off + wd];
                                for ox in ox0..ox1 {
                                    acc += xrow[ox * s + kx - spec.padding] * grow[ox];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Normalizes each length-`d` row; returns `(out, mean, rstd)`.
pub(crate) fn layer_norm_forward<S: Element>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    d: usize,
    eps: f64,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / d;
    let mut out = vec![S::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let dn = S::from_f64(d as f64);
    let eps = S::from_f64(eps);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let rstd = S::one() / (var + eps).sqrt();
        for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = (row[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<S: Element>(
    x: &[S],
    gamma: &[S],
    means: &[S],
    rstds: &[S],
    g: &[S],
    d: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / d;
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); d];
    let mut dbeta = vec![S::zero(); d];
    let dn = S::from_f64(d as f64);
    let mut xhat = vec![S::zero(); d];
    let mut dxhat = vec![S::zero(); d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = grow[j] * gamma[j];
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        let mean_dxhat = sum_dxhat / dn;
        let mean_dxhat_xhat = sum_dxhat_xhat / dn;
        for (j, o) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn softmax_forward<S: Element>(x: &[S], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

pub(crate) fn softmax_backward<S: Element>(y: &[S], g: &[S], n: usize) -> Vec<S> {
    let mut dx = vec![S::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<S: Element>(v: S) -> S {
    let half = S::from_f64(0.5);
    half * v * (S::one() + (v * S::from_f64(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<S: Element>(v: S) -> S {
    let half = S::from_f64(0.5);
    let cdf = half * (S::one() + (v * S::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = S::from_f64(FRAC_1_SQRT_2PI) * (-half * v * v).exp();
    cdf + v * pdf
}

/// Source sample positions for align-corners=false resizing along one axis.
/// Each entry is `(i0, i1, w0, w1)`.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample_forward<S: Element>(x: &[S], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, S::from_f64(wa), S::from_f64(wb)))
        .collect();
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (S::from_f64(wy0), S::from_f64(wy1));
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<S: Element>(g: &[S], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<S> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, S::from_f64(wa), S::from_f64(wb)))
        .collect();
    let mut dx = vec![S::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (S::from_f64(wy0), S::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = gp[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * gv;
                dst[y0 * w + x1] += wy0 * wx1 * gv;
                dst[y1 * w + x0] += wy1 * wx0 * gv;
                dst[y1 * w + x1] += wy1 * wx1 * gv;
            }
        }
    }
    dx
}

/// Mean of `max(z,0) − z·t + ln(1 + e^{−|z|})`.
pub(crate) fn bce_with_logits<S: Element>(z: &[S], t: &[S]) -> S {
    let mut acc = 0.0f64;
    for (&zv, &tv) in z.iter().zip(t) {
        let zf = zv.as_f64();
        acc += zf.max(0.0) - zf * tv.as_f64() + (-zf.abs()).exp().ln_1p();
    }
    S::from_f64(acc / z.len() as f64)
}

pub(crate) fn sigmoid<S: Element>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}
