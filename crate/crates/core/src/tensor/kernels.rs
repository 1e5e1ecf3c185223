//! Forward and backward kernels on raw row-major slices.
//!
//! Every kernel has a fixed summation order so results are bitwise
//! reproducible. `[C,H,W]` tensors are addressed as `c * H * W + i * W + j`,
//! with `i` the latitude row and `j` the longitude column.

use super::Real;

pub const GELU_C0: f64 = 0.797_884_560_8;
pub const GELU_C1: f64 = 0.044_715;

/// Source row for an offset tap: replicate the edge row in latitude.
#[inline]
pub fn clamp_row(i: usize, offset: isize, h: usize) -> usize {
    (i as isize + offset).clamp(0, h as isize - 1) as usize
}

/// Source column for an offset tap: wrap around in longitude.
#[inline]
pub fn wrap_col(j: usize, offset: isize, w: usize) -> usize {
    (j as isize + offset).rem_euclid(w as isize) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DwGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl DwGeom {
    #[inline]
    fn offset(&self, tap: usize) -> isize {
        (tap as isize - (self.k / 2) as isize) * self.dilation as isize
    }
}

/// `dst[j] += coef * src[(j + shift) mod w]` for one row.
#[inline]
fn axpy_wrapped<T: Real>(dst: &mut [T], src: &[T], coef: T, shift: usize) {
    let w = dst.len();
    let split = w - shift;
    for (d, s) in dst[..split].iter_mut().zip(&src[shift..]) {
        *d += coef * *s;
    }
    for (d, s) in dst[split..].iter_mut().zip(&src[..shift]) {
        *d += coef * *s;
    }
}

/// Depthwise cross-correlation with replicate/periodic padding.
pub fn dwconv_forward<T: Real>(x: &[T], kernel: &[T], g: DwGeom) -> Vec<T> {
    let DwGeom { c, h, w, k, .. } = g;
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for ch in 0..c {
        let xs = &x[ch * plane..(ch + 1) * plane];
        let os = &mut out[ch * plane..(ch + 1) * plane];
        let ks = &kernel[ch * k * k..(ch + 1) * k * k];
        for i in 0..h {
            let orow = &mut os[i * w..(i + 1) * w];
            for a in 0..k {
                let si = clamp_row(i, g.offset(a), h);
                let srow = &xs[si * w..(si + 1) * w];
                for b in 0..k {
                    let shift = wrap_col(0, g.offset(b), w);
                    axpy_wrapped(orow, srow, ks[a * k + b], shift);
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_kernel)`.
pub fn dwconv_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: DwGeom,
) -> (Vec<T>, Vec<T>) {
    let DwGeom { c, h, w, k, .. } = g;
    let plane = h * w;
    let mut gx = vec![T::zero(); c * plane];
    let mut gk = vec![T::zero(); c * k * k];
    for ch in 0..c {
        let xs = &x[ch * plane..(ch + 1) * plane];
        let gs = &grad_out[ch * plane..(ch + 1) * plane];
        let gxs = &mut gx[ch * plane..(ch + 1) * plane];
        let ks = &kernel[ch * k * k..(ch + 1) * k * k];
        let gks = &mut gk[ch * k * k..(ch + 1) * k * k];
        for a in 0..k {
            for b in 0..k {
                let kv = ks[a * k + b];
                let shift = wrap_col(0, g.offset(b), w);
                let mut acc = T::zero();
                for i in 0..h {
                    let si = clamp_row(i, g.offset(a), h);
                    let grow = &gs[i * w..(i + 1) * w];
                    let srow = &xs[si * w..(si + 1) * w];
                    for j in 0..w {
                        let sj = if j + shift >= w { j + shift - w } else { j + shift };
                        acc += grow[j] * srow[sj];
                    }
                    let gxrow = &mut gxs[si * w..(si + 1) * w];
                    for j in 0..w {
                        let sj = if j + shift >= w { j + shift - w } else { j + shift };
                        gxrow[sj] += kv * grow[j];
                    }
                }
                gks[a * k + b] = acc;
            }
        }
    }
    (gx, gk)
}

/// `out[o, p] = bias[o] + Σ_i weight[o, i] * x[i, p]` with `p` over pixels.
pub fn pointwise_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    cin: usize,
    cout: usize,
    pixels: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(cout * pixels);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, pixels));
    }
    T::gemm(
        cout,
        cin,
        pixels,
        weight,
        (cin as isize, 1),
        x,
        (pixels as isize, 1),
        T::one(),
        &mut out,
    );
    out
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn pointwise_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    cin: usize,
    cout: usize,
    pixels: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); cin * pixels];
    // Wᵀ · G
    T::gemm(
        cin,
        cout,
        pixels,
        weight,
        (1, cin as isize),
        grad_out,
        (pixels as isize, 1),
        T::zero(),
        &mut gx,
    );
    let mut gw = vec![T::zero(); cout * cin];
    // G · Xᵀ
    T::gemm(
        cout,
        pixels,
        cin,
        grad_out,
        (pixels as isize, 1),
        x,
        (1, pixels as isize),
        T::zero(),
        &mut gw,
    );
    let gb = grad_out
        .chunks_exact(pixels)
        .map(|row| row.iter().copied().sum())
        .collect();
    (gx, gw, gb)
}

/// Per-pixel statistics kept from the forward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalize over channels at each pixel, then apply per-channel gain and bias.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    pixels: usize,
    eps: T,
) -> (Vec<T>, NormCache<T>) {
    let inv_c = T::one() / T::lit(c as f64);
    let mut mean = vec![T::zero(); pixels];
    for row in x.chunks_exact(pixels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_c);
    let mut var = vec![T::zero(); pixels];
    for row in x.chunks_exact(pixels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&s| T::one() / (s * inv_c + eps).sqrt())
        .collect();
    let mut xhat = Vec::with_capacity(c * pixels);
    let mut out = Vec::with_capacity(c * pixels);
    for (ch, row) in x.chunks_exact(pixels).enumerate() {
        for p in 0..pixels {
            let n = (row[p] - mean[p]) * inv_std[p];
            xhat.push(n);
            out.push(gamma[ch] * n + beta[ch]);
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    grad_out: &[T],
    c: usize,
    pixels: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_c = T::one() / T::lit(c as f64);
    let mut m1 = vec![T::zero(); pixels];
    let mut m2 = vec![T::zero(); pixels];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let g = &grad_out[ch * pixels..(ch + 1) * pixels];
        let xh = &cache.xhat[ch * pixels..(ch + 1) * pixels];
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for p in 0..pixels {
            let gh = g[p] * gamma[ch];
            m1[p] += gh;
            m2[p] += gh * xh[p];
            sg += g[p];
            sgx += g[p] * xh[p];
        }
        ggamma[ch] = sgx;
        gbeta[ch] = sg;
    }
    let mut gx = Vec::with_capacity(c * pixels);
    for ch in 0..c {
        let g = &grad_out[ch * pixels..(ch + 1) * pixels];
        let xh = &cache.xhat[ch * pixels..(ch + 1) * pixels];
        for p in 0..pixels {
            let gh = g[p] * gamma[ch];
            gx.push(cache.inv_std[p] * (gh - m1[p] * inv_c - xh[p] * m2[p] * inv_c));
        }
    }
    (gx, ggamma, gbeta)
}

/// Index in the `[C·r², H, W]` source for each element of the `[C, H·r, W·r]`
/// pixel-shuffled output, in output order.
pub fn pixel_shuffle_map(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h * r, w * r);
    let mut map = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            let (hi, i) = (y / r, y % r);
            for x in 0..wo {
                let (wi, j) = (x / r, x % r);
                let src_c = ch * r * r + i * r + j;
                map.push((src_c * h + hi) * w + wi);
            }
        }
    }
    map
}

pub fn gather<T: Copy>(src: &[T], map: &[usize]) -> Vec<T> {
    map.iter().map(|&i| src[i]).collect()
}

pub fn scatter<T: Real>(grad: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&i, &g) in map.iter().zip(grad) {
        out[i] += g;
    }
    out
}

/// Align-corners sampling positions: `(lo, hi, frac)` per output index.
pub fn align_corners_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = if n_out > 1 {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_forward<T: Real>(
    x: &[T],
    c: usize,
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
) -> Vec<T> {
    let rows = align_corners_taps(h, h2);
    let cols = align_corners_taps(w, w2);
    let mut out = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        let xs = &x[ch * h * w..(ch + 1) * h * w];
        for &(i0, i1, fy) in &rows {
            let fy = T::lit(fy);
            let gy = T::one() - fy;
            for &(j0, j1, fx) in &cols {
                let fx = T::lit(fx);
                let gx = T::one() - fx;
                let top = gx * xs[i0 * w + j0] + fx * xs[i0 * w + j1];
                let bot = gx * xs[i1 * w + j0] + fx * xs[i1 * w + j1];
                out.push(gy * top + fy * bot);
            }
        }
    }
    out
}

pub fn resize_backward<T: Real>(
    grad_out: &[T],
    c: usize,
    (h, w): (usize, usize),
    (h2, w2): (usize, usize),
) -> Vec<T> {
    let rows = align_corners_taps(h, h2);
    let cols = align_corners_taps(w, w2);
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let gs = &mut gx[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * h2 * w2..(ch + 1) * h2 * w2];
        for (oi, &(i0, i1, fy)) in rows.iter().enumerate() {
            let fy = T::lit(fy);
            let gy = T::one() - fy;
            for (oj, &(j0, j1, fx)) in cols.iter().enumerate() {
                let fx = T::lit(fx);
                let gxw = T::one() - fx;
                let g = go[oi * w2 + oj];
                gs[i0 * w + j0] += gy * gxw * g;
                gs[i0 * w + j1] += gy * fx * g;
                gs[i1 * w + j0] += fy * gxw * g;
                gs[i1 * w + j1] += fy * fx * g;
            }
        }
    }
    gx
}

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c0 = T::lit(GELU_C0);
    let c1 = T::lit(GELU_C1);
    let half = T::lit(0.5);
    half * x * (T::one() + (c0 * (x + c1 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c0 = T::lit(GELU_C0);
    let c1 = T::lit(GELU_C1);
    let half = T::lit(0.5);
    let t = (c0 * (x + c1 * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c0 * (T::one() + T::lit(3.0) * c1 * x * x)
}

/// `(1 / (C·H·W)) Σ a_i |p - t|` over a `[C,H,W]` pair.
pub fn weighted_abs_mean<T: Real>(pred: &[T], target: &[T], rows: &[T], w: usize) -> T {
    weighted_reduce(pred, target, rows, w, |d| d.abs())
}

/// `(1 / (C·H·W)) Σ a_i (p - t)²` over a `[C,H,W]` pair.
pub fn weighted_sq_mean<T: Real>(pred: &[T], target: &[T], rows: &[T], w: usize) -> T {
    weighted_reduce(pred, target, rows, w, |d| d * d)
}

fn weighted_reduce<T: Real>(
    pred: &[T],
    target: &[T],
    rows: &[T],
    w: usize,
    f: impl Fn(T) -> T,
) -> T {
    let h = rows.len();
    let mut total = T::zero();
    for (r, (prow, trow)) in pred.chunks_exact(w).zip(target.chunks_exact(w)).enumerate() {
        let mut s = T::zero();
        for (&p, &t) in prow.iter().zip(trow) {
            s += f(p - t);
        }
        total += rows[r % h] * s;
    }
    total / T::lit(pred.len() as f64)
}
