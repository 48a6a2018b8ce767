//! Slice-level forward and backward kernels. All loops run in a fixed order
//! so results are bit-reproducible.

// Index loops keep several parallel buffers in step.
#![allow(clippy::needless_range_loop)]

use crate::real::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

pub(crate) fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw_out = g.ho * g.wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation; weight layout `[cout, cin, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let hw_out = g.ho * g.wo;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * hw_out;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * hw_out] };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let os = &mut out[s * out_len..(s + 1) * out_len];
        if let Some(b) = b {
            for (co, chunk) in os.chunks_mut(hw_out).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(false, false, g.cout, hw_out, g.patch(), w, xs, beta, os);
        } else {
            im2col(xs, g, &mut cols);
            gemm(false, false, g.cout, hw_out, g.patch(), w, &cols, beta, os);
        }
    }
    out
}

/// Accumulates into `dx`, `dw` and `db`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw_out = g.ho * g.wo;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * hw_out;
    if let Some(db) = db {
        for s in 0..g.n {
            let ds = &dout[s * out_len..(s + 1) * out_len];
            for (co, chunk) in ds.chunks(hw_out).enumerate() {
                db[co] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { g.patch() * hw_out }];
    if let Some(dw) = dw {
        for s in 0..g.n {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let ds = &dout[s * out_len..(s + 1) * out_len];
            if pointwise {
                gemm(false, true, g.cout, g.patch(), hw_out, ds, xs, T::one(), dw);
            } else {
                im2col(xs, g, &mut cols);
                gemm(false, true, g.cout, g.patch(), hw_out, ds, &cols, T::one(), dw);
            }
        }
    }
    if let Some(dx) = dx {
        for s in 0..g.n {
            let ds = &dout[s * out_len..(s + 1) * out_len];
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if pointwise {
                gemm(true, false, g.patch(), hw_out, g.cout, w, ds, T::one(), dxs);
            } else {
                gemm(true, false, g.patch(), hw_out, g.cout, w, ds, T::zero(), &mut cols);
                col2im_add(&cols, g, dxs);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per-(sample, group) statistics of a group norm forward pass.
pub(crate) struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dims: (usize, usize, usize),
    groups: usize,
) -> (Vec<T>, GroupNormCache<T>) {
    let (n, c, hw) = dims;
    let cg = c / groups;
    let m = cg * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * cg) * hw;
            let seg = &x[start..start + m];
            let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
            let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            rstd[s * groups + gi] = T::lit(r);
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xh = T::lit((x[i].as_f64() - mean) * r);
                    xhat[i] = xh;
                    y[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Real>(
    dy: &[T],
    gamma: &[T],
    cache: &GroupNormCache<T>,
    dims: (usize, usize, usize),
    groups: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let (n, c, hw) = dims;
    let cg = c / groups;
    let m = cg * hw;
    if let Some(dg) = dgamma {
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                dg[ch] += (off..off + hw).map(|i| dy[i] * cache.xhat[i]).sum::<T>();
            }
        }
    }
    if let Some(db) = dbeta {
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                db[ch] += dy[off..off + hw].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dx) = dx {
        for s in 0..n {
            for gi in 0..groups {
                let start = (s * c + gi * cg) * hw;
                let mut sum_d = 0.0f64;
                let mut sum_dx = 0.0f64;
                for i in start..start + m {
                    let ch = (i / hw) % c;
                    let d = (dy[i] * gamma[ch]).as_f64();
                    sum_d += d;
                    sum_dx += d * cache.xhat[i].as_f64();
                }
                let mean_d = sum_d / m as f64;
                let mean_dx = sum_dx / m as f64;
                let r = cache.rstd[s * groups + gi].as_f64();
                for i in start..start + m {
                    let ch = (i / hw) % c;
                    let d = (dy[i] * gamma[ch]).as_f64();
                    dx[i] += T::lit(r * (d - mean_d - cache.xhat[i].as_f64() * mean_dx));
                }
            }
        }
    }
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xo, v) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *v = srow[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xo in 0..w2 {
                dst[(y / 2) * w + xo / 2] += src[y * w2 + xo];
            }
        }
    }
}
