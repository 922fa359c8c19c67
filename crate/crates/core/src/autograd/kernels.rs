//! Forward and backward kernels over flat buffers. Shapes are validated by
//! the tape layer before these run.

use crate::tensor::{gemm, Dims5, Real, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct SpatialGeom {
    pub d: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl SpatialGeom {
    pub fn new(h: usize, w: usize, d: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < d || w + 2 * pad < d || stride == 0 {
            return None;
        }
        Some(SpatialGeom {
            d,
            stride,
            pad,
            ho: (h + 2 * pad - d) / stride + 1,
            wo: (w + 2 * pad - d) / stride + 1,
        })
    }
}

/// Output indices `o` with `0 <= o*s + k - p < len`, as a half-open range.
fn valid_range(len: usize, out: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if len + p > k {
        ((len + p - k - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Upper bound on lowered-column buffer elements (about L2-sized for f32);
/// batches are processed in chunks of samples that fit.
const COLS_BUDGET: usize = 1 << 18;

fn chunk_len(k: usize, ncols: usize, n: usize) -> usize {
    (COLS_BUDGET / (k * ncols).max(1)).clamp(1, n.max(1))
}

/// Writes the receptive fields of sample `n` into columns
/// `col_off..col_off + L·Ho·Wo` of a `[C·d·d, ld]` matrix.
fn im2col<T: Real>(x: &[T], xd: &Dims5, n: usize, g: &SpatialGeom, cols: &mut [T], col_off: usize, ld: usize) {
    let (d, s, p) = (g.d, g.stride, g.pad);
    let frame = xd.h * xd.w;
    let plane = g.ho * g.wo;
    let ncols = xd.l * plane;
    for c in 0..xd.c {
        let chan = (n * xd.c + c) * xd.l * frame;
        for kh in 0..d {
            let (ho_lo, ho_hi) = valid_range(xd.h, g.ho, kh, s, p);
            for kw in 0..d {
                let (wo_lo, wo_hi) = valid_range(xd.w, g.wo, kw, s, p);
                let row = &mut cols[((c * d + kh) * d + kw) * ld + col_off..][..ncols];
                if ho_hi - ho_lo < g.ho || wo_hi - wo_lo < g.wo {
                    row.fill(T::zero());
                }
                for l in 0..xd.l {
                    let src = chan + l * frame;
                    for ho in ho_lo..ho_hi {
                        let hi = ho * s + kh - p;
                        let dst = &mut row[l * plane + ho * g.wo..][..g.wo];
                        let base = src + hi * xd.w;
                        if s == 1 {
                            let lo = base + wo_lo + kw - p;
                            dst[wo_lo..wo_hi].copy_from_slice(&x[lo..lo + (wo_hi - wo_lo)]);
                        } else {
                            for wo in wo_lo..wo_hi {
                                dst[wo] = x[base + wo * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], xd: &Dims5, n: usize, g: &SpatialGeom, dx: &mut [T], col_off: usize, ld: usize) {
    let (d, s, p) = (g.d, g.stride, g.pad);
    let frame = xd.h * xd.w;
    let plane = g.ho * g.wo;
    let ncols = xd.l * plane;
    for c in 0..xd.c {
        let chan = (n * xd.c + c) * xd.l * frame;
        for kh in 0..d {
            let (ho_lo, ho_hi) = valid_range(xd.h, g.ho, kh, s, p);
            for kw in 0..d {
                let (wo_lo, wo_hi) = valid_range(xd.w, g.wo, kw, s, p);
                let row = &cols[((c * d + kh) * d + kw) * ld + col_off..][..ncols];
                for l in 0..xd.l {
                    let dst = chan + l * frame;
                    for ho in ho_lo..ho_hi {
                        let hi = ho * s + kh - p;
                        let src = &row[l * plane + ho * g.wo..][..g.wo];
                        let base = dst + hi * xd.w;
                        if s == 1 {
                            let lo = base + wo_lo + kw - p;
                            let d = &mut dx[lo..lo + (wo_hi - wo_lo)];
                            d.iter_mut().zip(&src[wo_lo..wo_hi]).for_each(|(a, &b)| *a += b);
                        } else {
                            for wo in wo_lo..wo_hi {
                                dx[base + wo * s + kw - p] += src[wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[n, co, :] = W · cols(n)` over chunks of samples, where `fill(n0, nb,
/// cols, ld)` lowers samples `n0..n0+nb` into a `[k, ld]` matrix.
fn lowered_forward<T: Real>(
    n: usize,
    k: usize,
    ncols: usize,
    w: &[T],
    cout: usize,
    mut fill: impl FnMut(usize, usize, &mut [T], usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); n * cout * ncols];
    let chunk = chunk_len(k, ncols, n);
    let mut cols = vec![T::zero(); k * chunk * ncols];
    let mut tmp = vec![T::zero(); cout * chunk * ncols];
    for n0 in (0..n).step_by(chunk) {
        let nb = chunk.min(n - n0);
        let ld = nb * ncols;
        fill(n0, nb, &mut cols, ld);
        gemm(cout, k, ld, T::one(), w, View::new(0, k, 1), &cols, View::new(0, ld, 1), T::zero(), &mut tmp, View::new(0, ld, 1));
        for i in 0..nb {
            for co in 0..cout {
                out[((n0 + i) * cout + co) * ncols..][..ncols].copy_from_slice(&tmp[co * ld + i * ncols..][..ncols]);
            }
        }
    }
    out
}

/// Receives `(n0, nb, dcols, ld)` column-gradient blocks in `lowered_backward`.
type Scatter<'a, T> = dyn FnMut(usize, usize, &[T], usize) + 'a;

/// Returns `dw` and, when `scatter` is given, hands each chunk's column
/// gradient `[k, ld]` to `scatter(n0, nb, dcols, ld)`.
#[allow(clippy::too_many_arguments)]
fn lowered_backward<T: Real>(
    n: usize,
    k: usize,
    ncols: usize,
    w: &[T],
    cout: usize,
    dout: &[T],
    mut fill: impl FnMut(usize, usize, &mut [T], usize),
    mut scatter: Option<&mut Scatter<T>>,
) -> Vec<T> {
    let mut dw = vec![T::zero(); cout * k];
    let chunk = chunk_len(k, ncols, n);
    let mut cols = vec![T::zero(); k * chunk * ncols];
    let mut dcm = vec![T::zero(); cout * chunk * ncols];
    let mut dcols = if scatter.is_some() { vec![T::zero(); k * chunk * ncols] } else { Vec::new() };
    for n0 in (0..n).step_by(chunk) {
        let nb = chunk.min(n - n0);
        let ld = nb * ncols;
        for i in 0..nb {
            for co in 0..cout {
                dcm[co * ld + i * ncols..][..ncols].copy_from_slice(&dout[((n0 + i) * cout + co) * ncols..][..ncols]);
            }
        }
        fill(n0, nb, &mut cols, ld);
        // dW += dOut · colsᵀ
        gemm(cout, ld, k, T::one(), &dcm, View::new(0, ld, 1), &cols, View::new(0, 1, ld), T::one(), &mut dw, View::new(0, k, 1));
        if let Some(scatter) = scatter.as_mut() {
            // dCols = Wᵀ · dOut
            gemm(k, cout, ld, T::one(), w, View::new(0, 1, k), &dcm, View::new(0, ld, 1), T::zero(), &mut dcols, View::new(0, ld, 1));
            scatter(n0, nb, &dcols, ld);
        }
    }
    dw
}

/// 2D convolution applied independently to every frame.
pub(crate) fn conv_spatial_fwd<T: Real>(x: &[T], xd: &Dims5, w: &[T], cout: usize, g: &SpatialGeom) -> Vec<T> {
    let k = xd.c * g.d * g.d;
    let ncols = xd.l * g.ho * g.wo;
    lowered_forward(xd.n, k, ncols, w, cout, |n0, nb, cols, ld| {
        for i in 0..nb {
            im2col(x, xd, n0 + i, g, cols, i * ncols, ld);
        }
    })
}

/// Returns `(dx, dw)`; `dx` is skipped (empty) unless `need_dx`.
pub(crate) fn conv_spatial_bwd<T: Real>(
    x: &[T],
    xd: &Dims5,
    w: &[T],
    cout: usize,
    g: &SpatialGeom,
    dout: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>) {
    let k = xd.c * g.d * g.d;
    let ncols = xd.l * g.ho * g.wo;
    let mut dx = if need_dx { vec![T::zero(); xd.numel()] } else { Vec::new() };
    let fill = |n0: usize, nb: usize, cols: &mut [T], ld: usize| {
        for i in 0..nb {
            im2col(x, xd, n0 + i, g, cols, i * ncols, ld);
        }
    };
    let mut scatter = |n0: usize, nb: usize, dcols: &[T], ld: usize| {
        for i in 0..nb {
            col2im_add(dcols, xd, n0 + i, g, &mut dx, i * ncols, ld);
        }
    };
    let scatter: Option<&mut Scatter<T>> = if need_dx { Some(&mut scatter) } else { None };
    let dw = lowered_backward(xd.n, k, ncols, w, cout, dout, fill, scatter);
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct TemporalGeom {
    pub t: usize,
    pub stride: usize,
    pub pad: usize,
    pub lo: usize,
}

impl TemporalGeom {
    pub fn new(l: usize, t: usize, stride: usize, pad: usize) -> Option<Self> {
        if l + 2 * pad < t || stride == 0 {
            return None;
        }
        Some(TemporalGeom {
            t,
            stride,
            pad,
            lo: (l + 2 * pad - t) / stride + 1,
        })
    }

    /// Input frame feeding output frame `lo` through tap `tau`, if not padding.
    fn src(&self, lo: usize, tau: usize, l: usize) -> Option<usize> {
        let pos = lo * self.stride + tau;
        if pos < self.pad || pos - self.pad >= l {
            None
        } else {
            Some(pos - self.pad)
        }
    }
}

/// Rows `(ci, τ)`, columns `(lo, h, w)` of sample `n`, starting at `col_off`.
fn temporal_cols<T: Real>(x: &[T], xd: &Dims5, n: usize, g: &TemporalGeom, cols: &mut [T], col_off: usize, ld: usize) {
    let hw = xd.h * xd.w;
    for ci in 0..xd.c {
        for tau in 0..g.t {
            let row = &mut cols[(ci * g.t + tau) * ld + col_off..][..g.lo * hw];
            for lo in 0..g.lo {
                let dst = &mut row[lo * hw..][..hw];
                match g.src(lo, tau, xd.l) {
                    Some(li) => dst.copy_from_slice(&x[((n * xd.c + ci) * xd.l + li) * hw..][..hw]),
                    None => dst.fill(T::zero()),
                }
            }
        }
    }
}

fn temporal_col2im_add<T: Real>(cols: &[T], xd: &Dims5, n: usize, g: &TemporalGeom, dx: &mut [T], col_off: usize, ld: usize) {
    let hw = xd.h * xd.w;
    for ci in 0..xd.c {
        for tau in 0..g.t {
            let row = &cols[(ci * g.t + tau) * ld + col_off..][..g.lo * hw];
            for lo in 0..g.lo {
                if let Some(li) = g.src(lo, tau, xd.l) {
                    let dst = &mut dx[((n * xd.c + ci) * xd.l + li) * hw..][..hw];
                    dst.iter_mut().zip(&row[lo * hw..][..hw]).for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
}

/// 1D convolution along `L`, point-wise over `(H, W)`. Weight is `Cout×Cin×t`.
pub(crate) fn conv_temporal_fwd<T: Real>(x: &[T], xd: &Dims5, w: &[T], cout: usize, g: &TemporalGeom) -> Vec<T> {
    let ncols = g.lo * xd.h * xd.w;
    lowered_forward(xd.n, xd.c * g.t, ncols, w, cout, |n0, nb, cols, ld| {
        for i in 0..nb {
            temporal_cols(x, xd, n0 + i, g, cols, i * ncols, ld);
        }
    })
}

pub(crate) fn conv_temporal_bwd<T: Real>(
    x: &[T],
    xd: &Dims5,
    w: &[T],
    cout: usize,
    g: &TemporalGeom,
    dout: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>) {
    let ncols = g.lo * xd.h * xd.w;
    let mut dx = if need_dx { vec![T::zero(); xd.numel()] } else { Vec::new() };
    let fill = |n0: usize, nb: usize, cols: &mut [T], ld: usize| {
        for i in 0..nb {
            temporal_cols(x, xd, n0 + i, g, cols, i * ncols, ld);
        }
    };
    let mut scatter = |n0: usize, nb: usize, dcols: &[T], ld: usize| {
        for i in 0..nb {
            temporal_col2im_add(dcols, xd, n0 + i, g, &mut dx, i * ncols, ld);
        }
    };
    let scatter: Option<&mut Scatter<T>> = if need_dx { Some(&mut scatter) } else { None };
    let dw = lowered_backward(xd.n, xd.c * g.t, ncols, w, cout, dout, fill, scatter);
    (dx, dw)
}

/// Adds a per-channel bias to an `N×C×S` buffer.
pub(crate) fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, spatial: usize) {
    let c = bias.len();
    for i in 0..n {
        for (ch, &b) in bias.iter().enumerate() {
            for v in &mut out[(i * c + ch) * spatial..][..spatial] {
                *v += b;
            }
        }
    }
}

pub(crate) fn channel_bias_grad<T: Real>(dout: &[T], c: usize, n: usize, spatial: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += dout[(i * c + ch) * spatial..][..spatial].iter().copied().sum();
        }
    }
    db
}

/// Per-channel moments over the batch and all trailing axes (biased variance).
pub(crate) fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((n * spatial) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += x[(i * c + ch) * spatial..][..spatial].iter().copied().sum();
        }
        let m = s / count;
        let mut q = T::zero();
        for i in 0..n {
            for &v in &x[(i * c + ch) * spatial..][..spatial] {
                q += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// `y = γ·(x−μ)·inv + β`; returns `(y, x̂)`.
pub(crate) fn norm_apply<T: Real>(
    x: &[T],
    n: usize,
    spatial: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let c = mean.len();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * spatial;
            for s in off..off + spatial {
                let h = (x[s] - mean[ch]) * inv_std[ch];
                xhat[s] = h;
                y[s] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Returns `(dx, dγ, dβ)`. With `batch_stats` the gradient flows through
/// the batch mean and variance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_bwd<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    spatial: usize,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * spatial;
            for s in off..off + spatial {
                dgamma[ch] += dy[s] * xhat[s];
                dbeta[ch] += dy[s];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    let m = T::from_f64((n * spatial) as f64);
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * spatial;
            let scale = gamma[ch] * inv_std[ch];
            for s in off..off + spatial {
                dx[s] = if batch_stats {
                    scale * (dy[s] - dbeta[ch] / m - xhat[s] * dgamma[ch] / m)
                } else {
                    scale * dy[s]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if k == 0 || stride == 0 || pad >= k || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(PoolGeom {
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }
}

/// Per-frame spatial max. Returns `(y, argmax)`; argmax indexes `x`, first
/// maximum in row-major window order wins.
pub(crate) fn max_pool_fwd<T: Real>(x: &[T], xd: &Dims5, g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let frames = xd.n * xd.c * xd.l;
    let plane = g.ho * g.wo;
    let mut y = vec![T::zero(); frames * plane];
    let mut arg = vec![0usize; frames * plane];
    for f in 0..frames {
        let base = f * xd.h * xd.w;
        for ho in 0..g.ho {
            for wo in 0..g.wo {
                let mut best: Option<(T, usize)> = None;
                for kh in 0..g.k {
                    let hi = ho * g.stride + kh;
                    if hi < g.pad || hi - g.pad >= xd.h {
                        continue;
                    }
                    for kw in 0..g.k {
                        let wi = wo * g.stride + kw;
                        if wi < g.pad || wi - g.pad >= xd.w {
                            continue;
                        }
                        let idx = base + (hi - g.pad) * xd.w + (wi - g.pad);
                        if best.is_none_or(|(b, _)| x[idx] > b) {
                            best = Some((x[idx], idx));
                        }
                    }
                }
                // pad < k guarantees at least one real element per window
                let (v, idx) = best.expect("window covers at least one element");
                y[f * plane + ho * g.wo + wo] = v;
                arg[f * plane + ho * g.wo + wo] = idx;
            }
        }
    }
    (y, arg)
}

pub(crate) fn softmax_row<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(z) − z[label]` with max subtraction. The arg-max term is
/// exactly 1 after shifting, so the remainder goes through `ln_1p`.
pub(crate) fn xent_row<T: Real>(logits: &[T], label: usize) -> T {
    let (arg, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |(ai, am), (i, z)| if z > am { (i, z) } else { (ai, am) });
    let rest: T = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    (max - logits[label]) + rest.ln_1p()
}
