//! Forward and adjoint kernels over channels-last buffers.
//!
//! Every `*_backward` function accumulates (`+=`) into its gradient outputs.

use crate::tensor::Real;

/// Two-tap linear interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
pub struct Tap2 {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Stencil for sampling `n_src` knots at normalized position `pos` in `[0, 1]`
/// (first knot at 0, last knot at 1).
pub fn align_corners_tap(n_src: usize, pos: f64) -> Tap2 {
    if n_src <= 1 {
        return Tap2 { i0: 0, i1: 0, w0: 1.0, w1: 0.0 };
    }
    let u = (pos * (n_src - 1) as f64).clamp(0.0, (n_src - 1) as f64);
    let i0 = (u.floor() as usize).min(n_src - 2);
    let f = u - i0 as f64;
    Tap2 { i0, i1: i0 + 1, w0: 1.0 - f, w1: f }
}

/// Taps resizing an axis of `n_src` samples to `n_out` samples with both end
/// points aligned.
pub fn resize_taps(n_src: usize, n_out: usize) -> Vec<Tap2> {
    (0..n_out)
        .map(|o| {
            let pos = if n_out > 1 { o as f64 / (n_out - 1) as f64 } else { 0.0 };
            align_corners_tap(n_src, pos)
        })
        .collect()
}

/// Half-pixel-center taps for integer upsampling by `s` (edge clamped).
pub fn half_pixel_taps(n_src: usize, s: usize) -> Vec<Tap2> {
    (0..n_src * s)
        .map(|o| {
            let src = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_src - 1);
            let i1 = (i0 + 1).min(n_src - 1);
            let f = src - i0 as f64;
            Tap2 { i0, i1, w0: 1.0 - f, w1: f }
        })
        .collect()
}

/// Trilinear sample of `src` `[tj, hj, wj, c]` at temporal tap `tt` onto an
/// `rows.len() x cols.len()` grid.
pub fn grid_sample<T: Real>(
    src: &[T],
    dims: [usize; 4],
    tt: Tap2,
    rows: &[Tap2],
    cols: &[Tap2],
    out: &mut [T],
) {
    let [_, hj, wj, c] = dims;
    let plane = hj * wj * c;
    let ow = cols.len();
    for (i, rt) in rows.iter().enumerate() {
        for (j, ct) in cols.iter().enumerate() {
            let o = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
            o.iter_mut().for_each(|v| *v = T::zero());
            for (ti, tw) in [(tt.i0, tt.w0), (tt.i1, tt.w1)] {
                if tw == 0.0 {
                    continue;
                }
                for (ri, rw) in [(rt.i0, rt.w0), (rt.i1, rt.w1)] {
                    if rw == 0.0 {
                        continue;
                    }
                    for (ci, cw) in [(ct.i0, ct.w0), (ct.i1, ct.w1)] {
                        if cw == 0.0 {
                            continue;
                        }
                        let w = T::lit(tw * rw * cw);
                        let base = ti * plane + (ri * wj + ci) * c;
                        for (ov, &sv) in o.iter_mut().zip(&src[base..base + c]) {
                            *ov += w * sv;
                        }
                    }
                }
            }
        }
    }
}

pub fn grid_sample_backward<T: Real>(
    dsrc: &mut [T],
    dims: [usize; 4],
    tt: Tap2,
    rows: &[Tap2],
    cols: &[Tap2],
    dout: &[T],
) {
    let [_, hj, wj, c] = dims;
    let plane = hj * wj * c;
    let ow = cols.len();
    for (i, rt) in rows.iter().enumerate() {
        for (j, ct) in cols.iter().enumerate() {
            let g = &dout[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (ti, tw) in [(tt.i0, tt.w0), (tt.i1, tt.w1)] {
                if tw == 0.0 {
                    continue;
                }
                for (ri, rw) in [(rt.i0, rt.w0), (rt.i1, rt.w1)] {
                    if rw == 0.0 {
                        continue;
                    }
                    for (ci, cw) in [(ct.i0, ct.w0), (ct.i1, ct.w1)] {
                        if cw == 0.0 {
                            continue;
                        }
                        let w = T::lit(tw * rw * cw);
                        let base = ti * plane + (ri * wj + ci) * c;
                        for (dv, &gv) in dsrc[base..base + c].iter_mut().zip(g) {
                            *dv += w * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Separable 2-D resampling of `[h, w, c]` with explicit row/col taps.
pub fn resample<T: Real>(x: &[T], w: usize, c: usize, rows: &[Tap2], cols: &[Tap2]) -> Vec<T> {
    let ow = cols.len();
    let mut out = vec![T::zero(); rows.len() * ow * c];
    for (i, rt) in rows.iter().enumerate() {
        let (r0, r1) = (rt.i0 * w, rt.i1 * w);
        let (a0, a1) = (T::lit(rt.w0), T::lit(rt.w1));
        for (j, ct) in cols.iter().enumerate() {
            let (b0, b1) = (T::lit(ct.w0), T::lit(ct.w1));
            let o = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
            let p00 = &x[(r0 + ct.i0) * c..(r0 + ct.i0 + 1) * c];
            let p01 = &x[(r0 + ct.i1) * c..(r0 + ct.i1 + 1) * c];
            let p10 = &x[(r1 + ct.i0) * c..(r1 + ct.i0 + 1) * c];
            let p11 = &x[(r1 + ct.i1) * c..(r1 + ct.i1 + 1) * c];
            for k in 0..c {
                o[k] = a0 * (b0 * p00[k] + b1 * p01[k]) + a1 * (b0 * p10[k] + b1 * p11[k]);
            }
        }
    }
    out
}

pub fn resample_backward<T: Real>(
    dx: &mut [T],
    w: usize,
    c: usize,
    rows: &[Tap2],
    cols: &[Tap2],
    dout: &[T],
) {
    let ow = cols.len();
    for (i, rt) in rows.iter().enumerate() {
        let (r0, r1) = (rt.i0 * w, rt.i1 * w);
        let (a0, a1) = (T::lit(rt.w0), T::lit(rt.w1));
        for (j, ct) in cols.iter().enumerate() {
            let (b0, b1) = (T::lit(ct.w0), T::lit(ct.w1));
            let g = &dout[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (idx, wgt) in [
                (r0 + ct.i0, a0 * b0),
                (r0 + ct.i1, a0 * b1),
                (r1 + ct.i0, a1 * b0),
                (r1 + ct.i1, a1 * b1),
            ] {
                let d = &mut dx[idx * c..(idx + 1) * c];
                for k in 0..c {
                    d[k] += wgt * g[k];
                }
            }
        }
    }
}

/// Depth-to-space: `[h, w, c*s*s]` to `[h*s, w*s, c]`, channel `ch*s*s + a*s + b`
/// lands at sub-pixel `(a, b)`.
pub fn pixel_shuffle<T: Real>(x: &[T], h: usize, w: usize, c: usize, s: usize) -> Vec<T> {
    let cin = c * s * s;
    let ow = w * s;
    let mut out = vec![T::zero(); h * s * ow * c];
    for i in 0..h {
        for j in 0..w {
            let src = &x[(i * w + j) * cin..(i * w + j + 1) * cin];
            for a in 0..s {
                for b in 0..s {
                    let o = ((i * s + a) * ow + j * s + b) * c;
                    for ch in 0..c {
                        out[o + ch] = src[ch * s * s + a * s + b];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward<T: Real>(
    dx: &mut [T],
    h: usize,
    w: usize,
    c: usize,
    s: usize,
    dout: &[T],
) {
    let cin = c * s * s;
    let ow = w * s;
    for i in 0..h {
        for j in 0..w {
            let d = &mut dx[(i * w + j) * cin..(i * w + j + 1) * cin];
            for a in 0..s {
                for b in 0..s {
                    let o = ((i * s + a) * ow + j * s + b) * c;
                    for ch in 0..c {
                        d[ch * s * s + a * s + b] += dout[o + ch];
                    }
                }
            }
        }
    }
}

/// Pointwise affine map over the trailing channel axis: `[p, cin] -> [p, cout]`.
pub fn linear<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, cin: usize, cout: usize) -> Vec<T> {
    let p = x.len() / cin;
    let mut out = vec![T::zero(); p * cout];
    for (xr, orow) in x.chunks_exact(cin).zip(out.chunks_exact_mut(cout)) {
        if let Some(b) = b {
            orow.copy_from_slice(b);
        }
        for (k, &xv) in xr.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wr = &w[k * cout..(k + 1) * cout];
            for (o, &wv) in orow.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    cin: usize,
    cout: usize,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for (drow, grow) in dx.chunks_exact_mut(cin).zip(dout.chunks_exact(cout)) {
            for (k, d) in drow.iter_mut().enumerate() {
                let wr = &w[k * cout..(k + 1) * cout];
                let mut acc = T::zero();
                for (&g, &wv) in grow.iter().zip(wr) {
                    acc += g * wv;
                }
                *d += acc;
            }
        }
    }
    if let Some(dw) = dw {
        for (xr, grow) in x.chunks_exact(cin).zip(dout.chunks_exact(cout)) {
            for (k, &xv) in xr.iter().enumerate() {
                if xv == T::zero() {
                    continue;
                }
                let dr = &mut dw[k * cout..(k + 1) * cout];
                for (d, &g) in dr.iter_mut().zip(grow) {
                    *d += xv * g;
                }
            }
        }
    }
    if let Some(db) = db {
        for grow in dout.chunks_exact(cout) {
            for (d, &g) in db.iter_mut().zip(grow) {
                *d += g;
            }
        }
    }
}

/// Channelwise layer normalization per pixel.
pub fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], c: usize, eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let n = T::lit(c as f64);
    let eps = T::lit(eps);
    for (xr, orow) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for k in 0..c {
            orow[k] = (xr[k] - mean) * rstd * g[k] + b[k];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    g: &[T],
    c: usize,
    eps: f64,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dg: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let n = T::lit(c as f64);
    let eps = T::lit(eps);
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for (p, (xr, gr)) in x.chunks_exact(c).zip(dout.chunks_exact(c)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for k in 0..c {
            xhat[k] = (xr[k] - mean) * rstd;
            dxhat[k] = gr[k] * g[k];
            m1 += dxhat[k];
            m2 += dxhat[k] * xhat[k];
        }
        m1 = m1 / n;
        m2 = m2 / n;
        if let Some(dx) = dx.as_deref_mut() {
            let d = &mut dx[p * c..(p + 1) * c];
            for k in 0..c {
                d[k] += rstd * (dxhat[k] - m1 - xhat[k] * m2);
            }
        }
        if let Some(dg) = dg.as_deref_mut() {
            for k in 0..c {
                dg[k] += gr[k] * xhat[k];
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for k in 0..c {
                db[k] += gr[k];
            }
        }
    }
}

/// Per-channel `ks x ks` convolution with zero "same" padding.
pub fn depthwise<T: Real>(
    x: &[T],
    k: &[T],
    b: Option<&[T]>,
    h: usize,
    w: usize,
    c: usize,
    ks: usize,
) -> Vec<T> {
    let r = ks / 2;
    let mut out = vec![T::zero(); h * w * c];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * c..(i * w + j + 1) * c];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for di in 0..ks {
                let ii = i + di;
                if ii < r || ii - r >= h {
                    continue;
                }
                let row = (ii - r) * w;
                for dj in 0..ks {
                    let jj = j + dj;
                    if jj < r || jj - r >= w {
                        continue;
                    }
                    let xp = &x[(row + jj - r) * c..(row + jj - r + 1) * c];
                    let kp = &k[(di * ks + dj) * c..(di * ks + dj + 1) * c];
                    for ch in 0..c {
                        o[ch] += kp[ch] * xp[ch];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Real>(
    x: &[T],
    k: &[T],
    h: usize,
    w: usize,
    c: usize,
    ks: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let r = ks / 2;
    for i in 0..h {
        for j in 0..w {
            let g = &dout[(i * w + j) * c..(i * w + j + 1) * c];
            if let Some(db) = db.as_deref_mut() {
                for ch in 0..c {
                    db[ch] += g[ch];
                }
            }
            for di in 0..ks {
                let ii = i + di;
                if ii < r || ii - r >= h {
                    continue;
                }
                let row = (ii - r) * w;
                for dj in 0..ks {
                    let jj = j + dj;
                    if jj < r || jj - r >= w {
                        continue;
                    }
                    let xi = (row + jj - r) * c;
                    let ki = (di * ks + dj) * c;
                    if let Some(dx) = dx.as_deref_mut() {
                        let kp = &k[ki..ki + c];
                        let d = &mut dx[xi..xi + c];
                        for ch in 0..c {
                            d[ch] += kp[ch] * g[ch];
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let xp = &x[xi..xi + c];
                        let d = &mut dk[ki..ki + c];
                        for ch in 0..c {
                            d[ch] += xp[ch] * g[ch];
                        }
                    }
                }
            }
        }
    }
}

/// Dense `ks x ks` convolution `[h, w, cin] -> [h, w, cout]`, zero "same"
/// padding, kernel laid out `[ks, ks, cin, cout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Real>(
    x: &[T],
    k: &[T],
    b: Option<&[T]>,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ks: usize,
) -> Vec<T> {
    let r = ks / 2;
    let mut out = vec![T::zero(); h * w * cout];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for di in 0..ks {
                let ii = i + di;
                if ii < r || ii - r >= h {
                    continue;
                }
                for dj in 0..ks {
                    let jj = j + dj;
                    if jj < r || jj - r >= w {
                        continue;
                    }
                    let xp = &x[((ii - r) * w + jj - r) * cin..((ii - r) * w + jj - r + 1) * cin];
                    let kt = &k[(di * ks + dj) * cin * cout..(di * ks + dj + 1) * cin * cout];
                    for (ci, &xv) in xp.iter().enumerate() {
                        let kr = &kt[ci * cout..(ci + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(kr) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ks: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let r = ks / 2;
    for i in 0..h {
        for j in 0..w {
            let g = &dout[(i * w + j) * cout..(i * w + j + 1) * cout];
            if let Some(db) = db.as_deref_mut() {
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            for di in 0..ks {
                let ii = i + di;
                if ii < r || ii - r >= h {
                    continue;
                }
                for dj in 0..ks {
                    let jj = j + dj;
                    if jj < r || jj - r >= w {
                        continue;
                    }
                    let xi = ((ii - r) * w + jj - r) * cin;
                    let ki = (di * ks + dj) * cin * cout;
                    for ci in 0..cin {
                        let kr = &k[ki + ci * cout..ki + (ci + 1) * cout];
                        if let Some(dx) = dx.as_deref_mut() {
                            let mut acc = T::zero();
                            for (&kv, &gv) in kr.iter().zip(g) {
                                acc += kv * gv;
                            }
                            dx[xi + ci] += acc;
                        }
                        if let Some(dk) = dk.as_deref_mut() {
                            let xv = x[xi + ci];
                            for (d, &gv) in dk[ki + ci * cout..ki + (ci + 1) * cout].iter_mut().zip(g)
                            {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Normalized 1-D Gaussian kernel of odd length `size`.
pub fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable filter, "valid" region only: `[h, w, c] -> [h-k+1, w-k+1, c]`.
pub fn filter_valid<T: Real>(x: &[T], h: usize, w: usize, c: usize, g: &[f64]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let g: Vec<T> = g.iter().map(|&v| T::lit(v)).collect();
    let mut tmp = vec![T::zero(); h * ow * c];
    for i in 0..h {
        for j in 0..ow {
            let o = &mut tmp[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (t, &gv) in g.iter().enumerate() {
                let xp = &x[(i * w + j + t) * c..(i * w + j + t + 1) * c];
                for ch in 0..c {
                    o[ch] += gv * xp[ch];
                }
            }
        }
    }
    let mut out = vec![T::zero(); oh * ow * c];
    for i in 0..oh {
        for (t, &gv) in g.iter().enumerate() {
            let src = &tmp[(i + t) * ow * c..(i + t + 1) * ow * c];
            let o = &mut out[i * ow * c..(i + 1) * ow * c];
            for (ov, &sv) in o.iter_mut().zip(src) {
                *ov += gv * sv;
            }
        }
    }
    out
}

pub fn filter_valid_backward<T: Real>(
    dx: &mut [T],
    h: usize,
    w: usize,
    c: usize,
    g: &[f64],
    dout: &[T],
) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let g: Vec<T> = g.iter().map(|&v| T::lit(v)).collect();
    let mut dtmp = vec![T::zero(); h * ow * c];
    for i in 0..oh {
        for (t, &gv) in g.iter().enumerate() {
            let d = &mut dtmp[(i + t) * ow * c..(i + t + 1) * ow * c];
            let go = &dout[i * ow * c..(i + 1) * ow * c];
            for (dv, &gov) in d.iter_mut().zip(go) {
                *dv += gv * gov;
            }
        }
    }
    for i in 0..h {
        for j in 0..ow {
            let gt = &dtmp[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (t, &gv) in g.iter().enumerate() {
                let d = &mut dx[(i * w + j + t) * c..(i * w + j + t + 1) * c];
                for ch in 0..c {
                    d[ch] += gv * gt[ch];
                }
            }
        }
    }
}

/// Separable filter with replicate padding; output has the input size.
pub fn filter_same_replicate<T: Real>(x: &[T], h: usize, w: usize, c: usize, g: &[f64]) -> Vec<T> {
    let r = (g.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let g: Vec<T> = g.iter().map(|&v| T::lit(v)).collect();
    let mut tmp = vec![T::zero(); h * w * c];
    for i in 0..h {
        for j in 0..w {
            let o = &mut tmp[(i * w + j) * c..(i * w + j + 1) * c];
            for (t, &gv) in g.iter().enumerate() {
                let jj = clampi(j as isize + t as isize - r, w);
                let xp = &x[(i * w + jj) * c..(i * w + jj + 1) * c];
                for ch in 0..c {
                    o[ch] += gv * xp[ch];
                }
            }
        }
    }
    let mut out = vec![T::zero(); h * w * c];
    for i in 0..h {
        for (t, &gv) in g.iter().enumerate() {
            let ii = clampi(i as isize + t as isize - r, h);
            let src = &tmp[ii * w * c..(ii + 1) * w * c];
            let o = &mut out[i * w * c..(i + 1) * w * c];
            for (ov, &sv) in o.iter_mut().zip(src) {
                *ov += gv * sv;
            }
        }
    }
    out
}

pub fn filter_same_replicate_backward<T: Real>(
    dx: &mut [T],
    h: usize,
    w: usize,
    c: usize,
    g: &[f64],
    dout: &[T],
) {
    let r = (g.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let g: Vec<T> = g.iter().map(|&v| T::lit(v)).collect();
    let mut dtmp = vec![T::zero(); h * w * c];
    for i in 0..h {
        for (t, &gv) in g.iter().enumerate() {
            let ii = clampi(i as isize + t as isize - r, h);
            let go = &dout[i * w * c..(i + 1) * w * c];
            let d = &mut dtmp[ii * w * c..(ii + 1) * w * c];
            for (dv, &gov) in d.iter_mut().zip(go) {
                *dv += gv * gov;
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            let gt = &dtmp[(i * w + j) * c..(i * w + j + 1) * c];
            for (t, &gv) in g.iter().enumerate() {
                let jj = clampi(j as isize + t as isize - r, w);
                let d = &mut dx[(i * w + jj) * c..(i * w + jj + 1) * c];
                for ch in 0..c {
                    d[ch] += gv * gt[ch];
                }
            }
        }
    }
}

/// 2x2 average pooling, stride 2; a trailing odd row/column is dropped.
pub fn avg_pool2<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let o = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = ((2 * i + a) * w + 2 * j + b) * c;
                for ch in 0..c {
                    o[ch] += q * x[p + ch];
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dx: &mut [T], h: usize, w: usize, c: usize, dout: &[T]) {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::lit(0.25);
    for i in 0..oh {
        for j in 0..ow {
            let g = &dout[(i * ow + j) * c..(i * ow + j + 1) * c];
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = ((2 * i + a) * w + 2 * j + b) * c;
                for ch in 0..c {
                    dx[p + ch] += q * g[ch];
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = k * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * k * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn align_corners_hits_knots_exactly() {
        for n in 2..7 {
            for k in 0..n {
                let t = align_corners_tap(n, k as f64 / (n - 1) as f64);
                let (idx, w) = if t.w1 == 1.0 { (t.i1, t.w1) } else { (t.i0, t.w0) };
                assert_eq!(idx, k);
                assert_eq!(w, 1.0);
            }
        }
    }

    #[test]
    fn half_pixel_taps_match_torch_convention() {
        // scale 2, 3 source pixels: src coords -0.25->0, 0.25, 0.75, 1.25, 1.75, 2.25
        let t = half_pixel_taps(3, 2);
        assert_eq!((t[0].i0, t[0].w1), (0, 0.0));
        assert_eq!((t[1].i0, t[1].w1), (0, 0.25));
        assert_eq!((t[2].i0, t[2].w1), (0, 0.75));
        assert_eq!((t[5].i0, t[5].i1), (2, 2));
    }

    #[test]
    fn pixel_shuffle_is_a_permutation() {
        let (h, w, c, s) = (2, 3, 2, 2);
        let x: Vec<f64> = (0..h * w * c * s * s).map(|v| v as f64).collect();
        let y = pixel_shuffle(&x, h, w, c, s);
        let mut back = vec![0.0; x.len()];
        pixel_shuffle_backward(&mut back, h, w, c, s, &y);
        assert_eq!(back, x);
        // channel 1, sub-pixel (1, 0) of source pixel (0, 0)
        assert_eq!(y[((1) * (w * s)) * c + 1], x[s * s + 2]);
    }

    #[test]
    fn gaussian_kernel_normalized() {
        let g = gaussian_1d(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((g[0] - g[10]).abs() < 1e-18);
    }

    #[test]
    fn replicate_filter_preserves_constants() {
        let x = vec![0.37f64; 5 * 4 * 2];
        let y = filter_same_replicate(&x, 5, 4, 2, &gaussian_1d(5, 1.0));
        for v in y {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let e = 1e-6;
            let fd = (gelu(x + e) - gelu(x - e)) / (2.0 * e);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
