//! Slice-level numerical kernels. Shapes are validated by the callers in
//! `graph`; everything here assumes consistent extents.

use rayon::prelude::*;

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    fn col_rows(&self) -> usize {
        self.cin * self.taps()
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Base (unshifted) input coordinate of tap (ky, kx) at output (oy, ox).
    #[inline]
    fn base(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> (isize, isize) {
        (
            (oy * self.stride + ky) as isize - self.pad as isize,
            (ox * self.stride + kx) as isize - self.pad as isize,
        )
    }
}

/// Pixel coordinate of a normalized grid value for an axis of extent `size`.
///
/// Grid values in [-1, 1] land on pixel centres 0..size-1. Results within a
/// few ulps of an integer are snapped so that the base grid reproduces
/// integer positions exactly.
#[inline]
pub fn grid_to_pixel<T: Real>(g: T, size: usize) -> T {
    let span = T::from_f64((size.max(1) - 1) as f64);
    let p = (g + T::one()) * span / T::from_f64(2.0);
    let r = p.round();
    let tol = T::epsilon() * T::from_f64(8.0 * size.max(1) as f64);
    if (p - r).abs() <= tol {
        r
    } else {
        p
    }
}

/// d(pixel)/d(grid) for an axis of extent `size`.
#[inline]
pub fn grid_scale<T: Real>(size: usize) -> T {
    T::from_f64((size.max(1) - 1) as f64 / 2.0)
}

/// Four-neighbour bilinear read of a single plane with zero exterior.
#[inline]
pub fn bilinear_read<T: Real>(plane: &[T], h: usize, w: usize, py: T, px: T) -> T {
    let mut acc = T::zero();
    for_each_neighbour(h, w, py, px, |idx, wt, _, _| acc += plane[idx] * wt);
    acc
}

/// Visits the in-bounds neighbours of (py, px) as
/// `(flat index, weight, d weight/d py, d weight/d px)`.
#[inline]
pub fn for_each_neighbour<T: Real>(h: usize, w: usize, py: T, px: T, mut f: impl FnMut(usize, T, T, T)) {
    let (pyf, pxf) = (py.as_f64(), px.as_f64());
    if !(pyf > -1.0 && pyf < h as f64 && pxf > -1.0 && pxf < w as f64) {
        return;
    }
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let y0 = y0f.as_f64() as isize;
    let x0 = x0f.as_f64() as isize;
    let one = T::one();
    let ys = [(y0, one - ly, -one), (y0 + 1, ly, one)];
    let xs = [(x0, one - lx, -one), (x0 + 1, lx, one)];
    for &(yy, wy, dy) in &ys {
        if yy < 0 || yy >= h as isize {
            continue;
        }
        for &(xx, wx, dx) in &xs {
            if xx < 0 || xx >= w as isize {
                continue;
            }
            f(yy as usize * w + xx as usize, wy * wx, dy * wx, wy * dx);
        }
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.taps() + ky * g.k + kx) * l;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (iy, ix) = g.base(oy, ox, ky, kx);
                        cols[row + oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.taps() + ky * g.k + kx) * l;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (iy, ix) = g.base(oy, ox, ky, kx);
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear im2col: tap (ky, kx) at output (oy, ox) reads the input at its
/// base position displaced by the offset pair stored at channels
/// (2t, 2t+1) = (dy, dx) of `off`.
fn deform_im2col<T: Real>(img: &[T], off: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let t = ky * g.k + kx;
                let row = (c * g.taps() + t) * l;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (by, bx) = g.base(oy, ox, ky, kx);
                        let p = oy * ow + ox;
                        let py = T::from_f64(by as f64) + off[2 * t * l + p];
                        let px = T::from_f64(bx as f64) + off[(2 * t + 1) * l + p];
                        cols[row + p] = bilinear_read(plane, g.h, g.w, py, px);
                    }
                }
            }
        }
    }
}

fn deform_col2im<T: Real>(dcols: &[T], img: &[T], off: &[T], g: &ConvGeom, dimg: &mut [T], doff: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for c in 0..g.cin {
        let base = c * g.h * g.w;
        for ky in 0..g.k {
            for kx in 0..g.k {
                let t = ky * g.k + kx;
                let row = (c * g.taps() + t) * l;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let p = oy * ow + ox;
                        let gr = dcols[row + p];
                        if gr == T::zero() {
                            continue;
                        }
                        let (by, bx) = g.base(oy, ox, ky, kx);
                        let py = T::from_f64(by as f64) + off[2 * t * l + p];
                        let px = T::from_f64(bx as f64) + off[(2 * t + 1) * l + p];
                        let (mut gy, mut gx) = (T::zero(), T::zero());
                        for_each_neighbour(g.h, g.w, py, px, |idx, wt, dwy, dwx| {
                            dimg[base + idx] += gr * wt;
                            let v = img[base + idx];
                            gy += gr * v * dwy;
                            gx += gr * v * dwx;
                        });
                        doff[2 * t * l + p] += gy;
                        doff[(2 * t + 1) * l + p] += gx;
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `off` switches to deformable sampling.
pub fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    off: Option<&[T]>,
) -> Vec<T> {
    let l = g.col_cols();
    let rows = g.col_rows();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * l;
    let off_sz = 2 * g.taps() * l;
    let mut out = vec![T::zero(); n * out_sz];
    out.par_chunks_mut(out_sz.max(1)).enumerate().for_each(|(i, o)| {
        let mut cols = vec![T::zero(); rows * l];
        let img = &x[i * in_sz..(i + 1) * in_sz];
        match off {
            Some(off) => deform_im2col(img, &off[i * off_sz..(i + 1) * off_sz], g, &mut cols),
            None => im2col(img, g, &mut cols),
        }
        if let Some(b) = bias {
            for (co, row) in o.chunks_mut(l).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.cout, rows, l, T::one(), weight, rows as isize, 1, &cols, l as isize, 1, beta, o, l as isize, 1,
        );
    });
    out
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
    pub doff: Option<Vec<T>>,
}

/// Batched convolution backward. Per-sample weight gradients are reduced in
/// sample order so results do not depend on scheduling.
pub fn conv_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    off: Option<&[T]>,
    dy: &[T],
) -> ConvGrads<T> {
    let l = g.col_cols();
    let rows = g.col_rows();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * l;
    let off_sz = 2 * g.taps() * l;
    let wsz = g.cout * rows;

    let per: Vec<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = &x[i * in_sz..(i + 1) * in_sz];
            let dyi = &dy[i * out_sz..(i + 1) * out_sz];
            let mut cols = vec![T::zero(); rows * l];
            match off {
                Some(off) => deform_im2col(img, &off[i * off_sz..(i + 1) * off_sz], g, &mut cols),
                None => im2col(img, g, &mut cols),
            }
            let mut dw = vec![T::zero(); wsz];
            // dW = dY · colsᵀ
            T::gemm(
                g.cout, l, rows, T::one(), dyi, l as isize, 1, &cols, 1, l as isize, T::zero(), &mut dw, rows as isize,
                1,
            );
            // dcols = Wᵀ · dY
            let mut dcols = vec![T::zero(); rows * l];
            T::gemm(
                rows, g.cout, l, T::one(), weight, 1, rows as isize, dyi, l as isize, 1, T::zero(), &mut dcols,
                l as isize, 1,
            );
            let mut dimg = vec![T::zero(); in_sz];
            let mut doff = Vec::new();
            match off {
                Some(off) => {
                    doff = vec![T::zero(); off_sz];
                    deform_col2im(&dcols, img, &off[i * off_sz..(i + 1) * off_sz], g, &mut dimg, &mut doff);
                }
                None => col2im(&dcols, g, &mut dimg),
            }
            let db: Vec<T> = dyi.chunks(l.max(1)).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect();
            (dimg, dw, db, doff)
        })
        .collect();

    let mut dx = Vec::with_capacity(n * in_sz);
    let mut dweight = vec![T::zero(); wsz];
    let mut dbias = vec![T::zero(); g.cout];
    let mut doff_all = off.map(|_| Vec::with_capacity(n * off_sz));
    for (dimg, dw, db, doff) in per {
        dx.extend_from_slice(&dimg);
        for (a, b) in dweight.iter_mut().zip(&dw) {
            *a += *b;
        }
        for (a, b) in dbias.iter_mut().zip(&db) {
            *a += *b;
        }
        if let Some(d) = doff_all.as_mut() {
            d.extend_from_slice(&doff);
        }
    }
    ConvGrads {
        dx,
        dweight,
        dbias,
        doff: doff_all,
    }
}

/// Grid sampling of `[n, c, h, w]` features at `[n, ho, wo, 2]` (x, y) grid
/// points.
pub fn grid_sample_forward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grid: &[T],
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let lo = ho * wo;
    let mut out = vec![T::zero(); n * c * lo];
    out.par_chunks_mut((c * lo).max(1)).enumerate().for_each(|(i, o)| {
        let gi = &grid[i * lo * 2..(i + 1) * lo * 2];
        for p in 0..lo {
            let px = grid_to_pixel(gi[2 * p], w);
            let py = grid_to_pixel(gi[2 * p + 1], h);
            for_each_neighbour(h, w, py, px, |idx, wt, _, _| {
                for ch in 0..c {
                    o[ch * lo + p] += x[(i * c + ch) * h * w + idx] * wt;
                }
            });
        }
    });
    out
}

pub fn grid_sample_backward<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    grid: &[T],
    ho: usize,
    wo: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>) {
    let lo = ho * wo;
    let sx: T = grid_scale(w);
    let sy: T = grid_scale(h);
    let per: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gi = &grid[i * lo * 2..(i + 1) * lo * 2];
            let mut dx = vec![T::zero(); c * h * w];
            let mut dg = vec![T::zero(); lo * 2];
            for p in 0..lo {
                let px = grid_to_pixel(gi[2 * p], w);
                let py = grid_to_pixel(gi[2 * p + 1], h);
                let (mut gpx, mut gpy) = (T::zero(), T::zero());
                for_each_neighbour(h, w, py, px, |idx, wt, dwy, dwx| {
                    for ch in 0..c {
                        let g = dy[(i * c + ch) * lo + p];
                        dx[ch * h * w + idx] += g * wt;
                        let v = x[(i * c + ch) * h * w + idx];
                        gpy += g * v * dwy;
                        gpx += g * v * dwx;
                    }
                });
                dg[2 * p] = gpx * sx;
                dg[2 * p + 1] = gpy * sy;
            }
            (dx, dg)
        })
        .collect();
    let mut dx = Vec::with_capacity(n * c * h * w);
    let mut dg = Vec::with_capacity(n * lo * 2);
    for (a, b) in per {
        dx.extend_from_slice(&a);
        dg.extend_from_slice(&b);
    }
    (dx, dg)
}

/// Batched matmul over a shared leading extent: `[b, m, k] x [b, k, n]`.
pub fn bmm<T: Real>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    out.par_chunks_mut((m * n).max(1)).enumerate().for_each(|(i, o)| {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * m * k..(i + 1) * m * k],
            k as isize,
            1,
            &b[i * k * n..(i + 1) * k * n],
            n as isize,
            1,
            T::zero(),
            o,
            n as isize,
            1,
        );
    });
    out
}

/// Gradients of batched matmul: `(dy·bᵀ, aᵀ·dy)`.
pub fn bmm_backward<T: Real>(
    a: &[T],
    b: &[T],
    dy: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); batch * m * k];
    let mut db = vec![T::zero(); batch * k * n];
    da.par_chunks_mut((m * k).max(1))
        .zip(db.par_chunks_mut((k * n).max(1)))
        .enumerate()
        .for_each(|(i, (dai, dbi))| {
            let ai = &a[i * m * k..(i + 1) * m * k];
            let bi = &b[i * k * n..(i + 1) * k * n];
            let dyi = &dy[i * m * n..(i + 1) * m * n];
            T::gemm(m, n, k, T::one(), dyi, n as isize, 1, bi, 1, n as isize, T::zero(), dai, k as isize, 1);
            T::gemm(k, m, n, T::one(), ai, 1, k as isize, dyi, n as isize, 1, T::zero(), dbi, n as isize, 1);
        });
    (da, db)
}
