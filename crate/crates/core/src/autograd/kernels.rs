//! Forward and adjoint kernels for the spatial ops used by the graph.
//!
//! Everything operates on channel-major `[c,h,w]` slices.

use crate::tensor::{clamp_index, matmul_into, reflect, Real};

/// Output range `[lo, hi)` of a row whose tap `j` reads in-bounds at offset `d`.
#[inline]
fn interior(j: usize, r: isize, w: usize) -> (usize, usize, isize) {
    let d = j as isize - r;
    let lo = (-d).max(0).min(w as isize) as usize;
    let hi = (w as isize - d).clamp(lo as isize, w as isize) as usize;
    (lo, hi, d)
}

/// Reflect-padded im2col for a same-size `kh×kw` convolution.
/// Output is `[c*kh*kw, h*w]` row-major.
pub fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut cols = vec![T::zero(); c * kh * kw * hw];
    let xmap: Vec<Vec<usize>> = (0..kw)
        .map(|j| (0..w).map(|xx| reflect(xx as isize + j as isize - rw, w)).collect())
        .collect();
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for i in 0..kh {
            for (j, xm) in xmap.iter().enumerate() {
                let row = &mut cols[((ci * kh + i) * kw + j) * hw..((ci * kh + i) * kw + j + 1) * hw];
                for y in 0..h {
                    let src = &plane[reflect(y as isize + i as isize - rh, h) * w..][..w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let (lo, hi, d) = interior(j, rw, w);
                    dst[lo..hi].copy_from_slice(&src[(lo as isize + d) as usize..(hi as isize + d) as usize]);
                    for xx in (0..lo).chain(hi..w) {
                        dst[xx] = src[xm[xx]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `[c,h,w]` image.
pub fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    let xmap: Vec<Vec<usize>> = (0..kw)
        .map(|j| (0..w).map(|xx| reflect(xx as isize + j as isize - rw, w)).collect())
        .collect();
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for i in 0..kh {
            for (j, xm) in xmap.iter().enumerate() {
                let row = &cols[((ci * kh + i) * kw + j) * hw..((ci * kh + i) * kw + j + 1) * hw];
                for y in 0..h {
                    let yy = reflect(y as isize + i as isize - rh, h);
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[yy * w..(yy + 1) * w];
                    let (lo, hi, d) = interior(j, rw, w);
                    for (o, &g) in dst[(lo as isize + d) as usize..(hi as isize + d) as usize].iter_mut().zip(&src[lo..hi]) {
                        *o += g;
                    }
                    for xx in (0..lo).chain(hi..w) {
                        dst[xm[xx]] += src[xx];
                    }
                }
            }
        }
    }
    x
}

pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvShape {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, s: &ConvShape) -> Vec<T> {
    let hw = s.h * s.w;
    let mut out = vec![T::zero(); s.cout * hw];
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if s.kh == 1 && s.kw == 1 {
        matmul_into(s.cout, s.cin, hw, weight, x, beta, &mut out);
    } else {
        let cols = im2col(x, s.cin, s.h, s.w, s.kh, s.kw);
        matmul_into(s.cout, s.k(), hw, weight, &cols, beta, &mut out);
    }
    out
}

/// Returns `(dx, dweight, dbias)`; entries are `None` when not requested.
pub fn conv2d_backward<T: Real>(
    grad: &[T],
    x: &[T],
    weight: &[T],
    s: &ConvShape,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = s.h * s.w;
    let k = s.k();
    let pointwise = s.kh == 1 && s.kw == 1;
    let db = need_b.then(|| (0..s.cout).map(|o| grad[o * hw..(o + 1) * hw].iter().copied().sum()).collect());
    let dw = need_w.then(|| {
        let owned;
        let cols: &[T] = if pointwise {
            x
        } else {
            owned = im2col(x, s.cin, s.h, s.w, s.kh, s.kw);
            &owned
        };
        let mut dw = vec![T::zero(); s.cout * k];
        // grad[cout×hw] · colsᵀ[hw×k]
        T::gemm(
            s.cout,
            hw,
            k,
            T::one(),
            grad,
            hw as isize,
            1,
            cols,
            1,
            hw as isize,
            T::zero(),
            &mut dw,
            k as isize,
            1,
        );
        dw
    });
    let dx = need_x.then(|| {
        let mut dcols = vec![T::zero(); k * hw];
        // weightᵀ[k×cout] · grad[cout×hw]
        T::gemm(
            k,
            s.cout,
            hw,
            T::one(),
            weight,
            1,
            k as isize,
            grad,
            hw as isize,
            1,
            T::zero(),
            &mut dcols,
            hw as isize,
            1,
        );
        if pointwise {
            dcols
        } else {
            col2im(&dcols, s.cin, s.h, s.w, s.kh, s.kw)
        }
    });
    (dx, dw, db)
}

/// Bilinear sampling position after clamp-to-edge.
#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
    /// False when the coordinate was clamped (zero derivative w.r.t. position).
    live: bool,
}

#[inline]
fn tap<T: Real>(pos: T, n: usize) -> Tap<T> {
    let hi = T::from_usize(n - 1).unwrap();
    let (p, live) = if pos < T::zero() {
        (T::zero(), false)
    } else if pos > hi {
        (hi, false)
    } else {
        (pos, true)
    };
    let i0 = p.floor().to_usize().unwrap().min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Tap {
        i0,
        i1,
        frac: p - T::from_usize(i0).unwrap(),
        live,
    }
}

/// `out(c,y,x) = bilinear(x, (x + off[0,y,x], y + off[1,y,x]))`, clamp-to-edge.
pub fn warp_forward<T: Real>(x: &[T], off: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            let tx = tap(T::from_usize(xx).unwrap() + off[p], w);
            let ty = tap(T::from_usize(y).unwrap() + off[hw + p], h);
            let (fx, fy) = (tx.frac, ty.frac);
            for k in 0..c {
                let pl = &x[k * hw..];
                let top = pl[ty.i0 * w + tx.i0] * (T::one() - fx) + pl[ty.i0 * w + tx.i1] * fx;
                let bot = pl[ty.i1 * w + tx.i0] * (T::one() - fx) + pl[ty.i1 * w + tx.i1] * fx;
                out[k * hw + p] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn warp_backward<T: Real>(
    grad: &[T],
    x: &[T],
    off: &[T],
    c: usize,
    h: usize,
    w: usize,
    need_x: bool,
    need_off: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = h * w;
    let mut dx = need_x.then(|| vec![T::zero(); c * hw]);
    let mut doff = need_off.then(|| vec![T::zero(); 2 * hw]);
    for y in 0..h {
        for xx in 0..w {
            let p = y * w + xx;
            let tx = tap(T::from_usize(xx).unwrap() + off[p], w);
            let ty = tap(T::from_usize(y).unwrap() + off[hw + p], h);
            let (fx, fy) = (tx.frac, ty.frac);
            let (gx_w, gy_w) = (T::one() - fx, T::one() - fy);
            let mut gox = T::zero();
            let mut goy = T::zero();
            for k in 0..c {
                let g = grad[k * hw + p];
                if g == T::zero() {
                    continue;
                }
                if let Some(dx) = dx.as_mut() {
                    let pl = &mut dx[k * hw..];
                    pl[ty.i0 * w + tx.i0] += g * gy_w * gx_w;
                    pl[ty.i0 * w + tx.i1] += g * gy_w * fx;
                    pl[ty.i1 * w + tx.i0] += g * fy * gx_w;
                    pl[ty.i1 * w + tx.i1] += g * fy * fx;
                }
                if need_off {
                    let pl = &x[k * hw..];
                    let (v00, v01) = (pl[ty.i0 * w + tx.i0], pl[ty.i0 * w + tx.i1]);
                    let (v10, v11) = (pl[ty.i1 * w + tx.i0], pl[ty.i1 * w + tx.i1]);
                    if tx.live {
                        gox += g * (gy_w * (v01 - v00) + fy * (v11 - v10));
                    }
                    if ty.live {
                        goy += g * (gx_w * (v10 - v00) + fx * (v11 - v01));
                    }
                }
            }
            if let Some(d) = doff.as_mut() {
                d[p] = gox;
                d[hw + p] = goy;
            }
        }
    }
    (dx, doff)
}

/// Per-pixel separable filtering with reflect padding:
/// `out(c,p) = sum_i sum_j kv[c,i,p] kh[c,j,p] x(c, p + (i-r, j-r))`.
/// Kernels are `[c*k, h, w]` with tap index fastest within a channel block.
pub fn sepconv_forward<T: Real>(x: &[T], kv: &[T], kh: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let r = (k / 2) as isize;
    let ymap: Vec<Vec<usize>> = (0..h).map(|y| (0..k).map(|i| reflect(y as isize + i as isize - r, h)).collect()).collect();
    let xmap: Vec<Vec<usize>> = (0..w).map(|xx| (0..k).map(|j| reflect(xx as isize + j as isize - r, w)).collect()).collect();
    let mut out = vec![T::zero(); c * hw];
    let mut row = vec![T::zero(); k];
    for ch in 0..c {
        let pl = &x[ch * hw..(ch + 1) * hw];
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                for (i, rv) in row.iter_mut().enumerate() {
                    let base = ymap[y][i] * w;
                    let mut acc = T::zero();
                    for j in 0..k {
                        acc += kh[(ch * k + j) * hw + p] * pl[base + xmap[xx][j]];
                    }
                    *rv = acc;
                }
                let mut acc = T::zero();
                for (i, &rv) in row.iter().enumerate() {
                    acc += kv[(ch * k + i) * hw + p] * rv;
                }
                out[ch * hw + p] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn sepconv_backward<T: Real>(
    grad: &[T],
    x: &[T],
    kv: &[T],
    kh: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let hw = h * w;
    let r = (k / 2) as isize;
    let ymap: Vec<Vec<usize>> = (0..h).map(|y| (0..k).map(|i| reflect(y as isize + i as isize - r, h)).collect()).collect();
    let xmap: Vec<Vec<usize>> = (0..w).map(|xx| (0..k).map(|j| reflect(xx as isize + j as isize - r, w)).collect()).collect();
    let mut dx = need[0].then(|| vec![T::zero(); c * hw]);
    let mut dkv = need[1].then(|| vec![T::zero(); c * k * hw]);
    let mut dkh = need[2].then(|| vec![T::zero(); c * k * hw]);
    let mut hsum = vec![T::zero(); k];
    let mut vsum = vec![T::zero(); k];
    for ch in 0..c {
        let pl = &x[ch * hw..(ch + 1) * hw];
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                let g = grad[ch * hw + p];
                if g == T::zero() {
                    continue;
                }
                hsum.fill(T::zero());
                vsum.fill(T::zero());
                for i in 0..k {
                    let base = ymap[y][i] * w;
                    let kvi = kv[(ch * k + i) * hw + p];
                    for j in 0..k {
                        let khj = kh[(ch * k + j) * hw + p];
                        let idx = base + xmap[xx][j];
                        let v = pl[idx];
                        hsum[i] += khj * v;
                        vsum[j] += kvi * v;
                        if let Some(dx) = dx.as_mut() {
                            dx[ch * hw + idx] += g * kvi * khj;
                        }
                    }
                }
                if let Some(d) = dkv.as_mut() {
                    for i in 0..k {
                        d[(ch * k + i) * hw + p] = g * hsum[i];
                    }
                }
                if let Some(d) = dkh.as_mut() {
                    for j in 0..k {
                        d[(ch * k + j) * hw + p] = g * vsum[j];
                    }
                }
            }
        }
    }
    [dx, dkv, dkh]
}

/// Source taps of a 1-D bilinear resize (half-pixel centers, edge clamped).
pub fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn resize_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let pl = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64c(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64c(fx);
                let top = pl[y0 * w + x0] * (T::one() - fx) + pl[y0 * w + x1] * fx;
                let bot = pl[y1 * w + x0] * (T::one() - fx) + pl[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_backward<T: Real>(grad: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let pl = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64c(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64c(fx);
                let g = grad[(ch * oh + oy) * ow + ox];
                pl[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                pl[y0 * w + x1] += g * (T::one() - fy) * fx;
                pl[y1 * w + x0] += g * fy * (T::one() - fx);
                pl[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

/// `[c*s*s, h, w] -> [c, h*s, w*s]` with `out[c, y*s+i, x*s+j] = in[c*s*s + i*s + j, y, x]`.
pub fn pixel_shuffle<T: Real>(x: &[T], c: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for i in 0..s {
            for j in 0..s {
                let src = &x[(ch * s * s + i * s + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * oh + y * s + i) * ow + xx * s + j] = src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_unshuffle<T: Real>(x: &[T], c: usize, oh: usize, ow: usize, s: usize) -> Vec<T> {
    let (h, w) = (oh / s, ow / s);
    let mut out = vec![T::zero(); c * s * s * h * w];
    for ch in 0..c {
        for i in 0..s {
            for j in 0..s {
                let dst = &mut out[(ch * s * s + i * s + j) * h * w..][..h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = x[(ch * oh + y * s + i) * ow + xx * s + j];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of the reflect-padded box filter.
pub fn box_filter_adjoint<T: Real>(grad: &[T], c: usize, h: usize, w: usize, size: usize) -> Vec<T> {
    let r = (size / 2) as isize;
    let inv = T::one() / T::from_usize(size * size).unwrap();
    let mut dx = vec![T::zero(); grad.len()];
    for k in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let g = grad[k * h * w + y * w + xx] * inv;
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for ddx in -r..=r {
                        dx[k * h * w + yy * w + reflect(xx as isize + ddx, w)] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Clamp-to-edge integer shift, used by tests and the degenerate warp path.
pub fn shift_clamped<T: Real>(x: &[T], c: usize, h: usize, w: usize, dx: isize, dy: isize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for k in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let sy = clamp_index(y as isize + dy, h);
                let sx = clamp_index(xx as isize + dx, w);
                out[(k * h + y) * w + xx] = x[(k * h + sy) * w + sx];
            }
        }
    }
    out
}
