//! Raw forward/backward kernels on NCHW buffers.
//!
//! Convolutions lower to `im2col` + GEMM per batch element. Batch elements
//! are processed in parallel; weight gradients are reduced over the batch in
//! index order so results do not depend on the thread count.

use super::{gemm, Real};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom { stride, pad, dilation }
    }

    /// Stride 1, "same" padding for an odd kernel `k` at dilation `d`.
    pub const fn same(k: usize, dilation: usize) -> Self {
        ConvGeom { stride: 1, pad: dilation * (k - 1) / 2, dilation }
    }

    /// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` if not positive.
    pub fn conv_out(&self, n: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = n + 2 * self.pad;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// `(n - 1) s - 2p + d(k-1) + 1`, or `None` if not positive.
    pub fn transposed_out(&self, n: usize, k: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return None;
        }
        let full = (n - 1) * self.stride + self.dilation * (k - 1) + 1;
        full.checked_sub(2 * self.pad).filter(|&v| v > 0)
    }

    fn is_pointwise(&self, k: usize) -> bool {
        k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Extents of a convolution. For a transposed convolution `(h, w)` is the
/// input plane and `(oh, ow)` the larger output plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Unfolds one `c x ih x iw` image into a `(c k k) x (oh ow)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(img: &[T], c: usize, ih: usize, iw: usize, k: usize, g: ConvGeom, oh: usize, ow: usize, col: &mut [T]) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * ih * iw..(ch + 1) * ih * iw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= ih as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * iw..(iy as usize + 1) * iw];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < iw as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back into an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(col: &[T], c: usize, ih: usize, iw: usize, k: usize, g: ConvGeom, oh: usize, ow: usize, img: &mut [T]) {
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * ih * iw..(ch + 1) * ih * iw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ch * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * iw..(iy as usize + 1) * iw];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < iw as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], p: usize) {
    for (chunk, &b) in out.chunks_mut(p).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Sums `dy` (`n x c x p`) over batch and plane.
fn bias_grad<T: Real>(dy: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for (ch, d) in db.iter_mut().enumerate() {
            let s = &dy[(i * c + ch) * p..][..p];
            *d += s.iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    db
}

/// Sums per-element weight gradients in batch order.
fn reduce_in_order<T: Real>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for part in it {
        acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    acc
}

/// Cross-correlation. `x`: `n cin h w`, `wt`: `cout cin k k`.
pub fn conv2d_forward<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, s: &ConvShape, g: ConvGeom) -> Vec<T> {
    let kk = s.cin * s.k * s.k;
    let p = s.oh * s.ow;
    let mut out = vec![T::zero(); s.n * s.cout * p];
    let pointwise = g.is_pointwise(s.k);
    par::for_each_chunk_mut(&mut out, s.cout * p, |i, y| {
        let xi = &x[i * s.cin * s.h * s.w..(i + 1) * s.cin * s.h * s.w];
        if pointwise {
            gemm(s.cout, kk, p, wt, false, xi, false, y, false);
        } else {
            let mut col = vec![T::zero(); kk * p];
            im2col(xi, s.cin, s.h, s.w, s.k, g, s.oh, s.ow, &mut col);
            gemm(s.cout, kk, p, wt, false, &col, false, y, false);
        }
        if let Some(b) = bias {
            add_bias(y, b, p);
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    s: &ConvShape,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let kk = s.cin * s.k * s.k;
    let p = s.oh * s.ow;
    let isz = s.cin * s.h * s.w;
    let pointwise = g.is_pointwise(s.k);
    let parts = par::map_range(s.n, |i| {
        let xi = &x[i * isz..(i + 1) * isz];
        let dyi = &dy[i * s.cout * p..(i + 1) * s.cout * p];
        let dx = need_dx.then(|| {
            let mut dxi = vec![T::zero(); isz];
            if pointwise {
                gemm(kk, s.cout, p, wt, true, dyi, false, &mut dxi, false);
            } else {
                let mut dcol = vec![T::zero(); kk * p];
                gemm(kk, s.cout, p, wt, true, dyi, false, &mut dcol, false);
                col2im(&dcol, s.cin, s.h, s.w, s.k, g, s.oh, s.ow, &mut dxi);
            }
            dxi
        });
        let dw = need_dw.then(|| {
            let mut dwi = vec![T::zero(); s.cout * kk];
            if pointwise {
                gemm(s.cout, p, kk, dyi, false, xi, true, &mut dwi, false);
            } else {
                let mut col = vec![T::zero(); kk * p];
                im2col(xi, s.cin, s.h, s.w, s.k, g, s.oh, s.ow, &mut col);
                gemm(s.cout, p, kk, dyi, false, &col, true, &mut dwi, false);
            }
            dwi
        });
        (dx, dw)
    });
    let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    ConvGrads {
        dx: need_dx.then(|| dxs.into_iter().flatten().flatten().collect()),
        dw: need_dw.then(|| reduce_in_order(dws.into_iter().flatten().collect())),
        db: bias_grad(dy, s.n, s.cout, p),
    }
}

/// Transposed convolution (adjoint of a strided convolution).
/// `x`: `n cin h w`, `wt`: `cin cout k k`, output `n cout oh ow`.
pub fn conv_transpose2d_forward<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, s: &ConvShape, g: ConvGeom) -> Vec<T> {
    let ck = s.cout * s.k * s.k;
    let hw = s.h * s.w;
    let op = s.oh * s.ow;
    let mut out = vec![T::zero(); s.n * s.cout * op];
    par::for_each_chunk_mut(&mut out, s.cout * op, |i, y| {
        let xi = &x[i * s.cin * hw..(i + 1) * s.cin * hw];
        let mut col = vec![T::zero(); ck * hw];
        gemm(ck, s.cin, hw, wt, true, xi, false, &mut col, false);
        col2im(&col, s.cout, s.oh, s.ow, s.k, g, s.h, s.w, y);
        if let Some(b) = bias {
            add_bias(y, b, op);
        }
    });
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    s: &ConvShape,
    g: ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let ck = s.cout * s.k * s.k;
    let hw = s.h * s.w;
    let op = s.oh * s.ow;
    let parts = par::map_range(s.n, |i| {
        let xi = &x[i * s.cin * hw..(i + 1) * s.cin * hw];
        let dyi = &dy[i * s.cout * op..(i + 1) * s.cout * op];
        let mut col = vec![T::zero(); ck * hw];
        im2col(dyi, s.cout, s.oh, s.ow, s.k, g, s.h, s.w, &mut col);
        let dx = need_dx.then(|| {
            let mut dxi = vec![T::zero(); s.cin * hw];
            gemm(s.cin, ck, hw, wt, false, &col, false, &mut dxi, false);
            dxi
        });
        let dw = need_dw.then(|| {
            let mut dwi = vec![T::zero(); s.cin * ck];
            gemm(s.cin, hw, ck, xi, false, &col, true, &mut dwi, false);
            dwi
        });
        (dx, dw)
    });
    let (dxs, dws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    ConvGrads {
        dx: need_dx.then(|| dxs.into_iter().flatten().flatten().collect()),
        dw: need_dw.then(|| reduce_in_order(dws.into_iter().flatten().collect())),
        db: bias_grad(dy, s.n, s.cout, op),
    }
}

/// Max over each of `gy x gx` regions with edges at `floor(j h / gy)`.
/// Returns the maxima and the flat input index of each (first on ties).
pub fn region_max<T: Real>(x: &[T], nc: usize, h: usize, w: usize, gy: usize, gx: usize) -> (Vec<T>, Vec<usize>) {
    let g = gy * gx;
    let mut out = vec![T::zero(); nc * g];
    let mut arg = vec![0usize; nc * g];
    let planes = par::map_range(nc, |plane| {
        let base = plane * h * w;
        let xs = &x[base..base + h * w];
        let mut vals = Vec::with_capacity(g);
        let mut idx = Vec::with_capacity(g);
        for ry in 0..gy {
            let (y0, y1) = (ry * h / gy, (ry + 1) * h / gy);
            for rx in 0..gx {
                let (x0, x1) = (rx * w / gx, (rx + 1) * w / gx);
                let mut best = y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let j = yy * w + xx;
                        if xs[j] > xs[best] {
                            best = j;
                        }
                    }
                }
                vals.push(xs[best]);
                idx.push(base + best);
            }
        }
        (vals, idx)
    });
    for (plane, (v, i)) in planes.into_iter().enumerate() {
        out[plane * g..(plane + 1) * g].copy_from_slice(&v);
        arg[plane * g..(plane + 1) * g].copy_from_slice(&i);
    }
    (out, arg)
}

/// 2x2 stride-2 max pooling. Returns maxima and flat argmax indices.
pub fn maxpool2<T: Real>(x: &[T], nc: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); nc * oh * ow];
    let mut arg = vec![0usize; nc * oh * ow];
    let planes = par::map_range(nc, |plane| {
        let base = plane * h * w;
        let mut vals = Vec::with_capacity(oh * ow);
        let mut idx = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                vals.push(x[best]);
                idx.push(best);
            }
        }
        (vals, idx)
    });
    let g = oh * ow;
    for (plane, (v, i)) in planes.into_iter().enumerate() {
        out[plane * g..(plane + 1) * g].copy_from_slice(&v);
        arg[plane * g..(plane + 1) * g].copy_from_slice(&i);
    }
    (out, arg)
}

/// Routes `dy` to the recorded argmax positions.
pub fn scatter_argmax<T: Real>(dy: &[T], arg: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// `y = x w^T + b` with `x`: `n x din`, `w`: `dout x din`.
pub fn linear_forward<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * dout];
    gemm(n, din, dout, x, false, wt, true, &mut y, false);
    if let Some(b) = bias {
        for row in y.chunks_mut(dout) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Real>(x: &[T], wt: &[T], dy: &[T], n: usize, din: usize, dout: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * din];
    gemm(n, dout, din, dy, false, wt, false, &mut dx, false);
    let mut dw = vec![T::zero(); dout * din];
    gemm(dout, n, din, dy, true, x, false, &mut dw, false);
    let mut db = vec![T::zero(); dout];
    for row in dy.chunks(dout) {
        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
    }
    (dx, dw, db)
}
