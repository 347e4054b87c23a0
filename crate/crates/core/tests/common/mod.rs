//! Brute-force reference implementations and finite-difference checking
//! shared by the integration suites.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spalign::tensor::Tensor;
use spalign::{Graph, Result, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Zero-exterior four-neighbour read at fractional pixel (py, px).
pub fn bilinear_px(plane: &[f64], h: usize, w: usize, py: f64, px: f64) -> f64 {
    let (y0, x0) = (py.floor(), px.floor());
    let (ly, lx) = (py - y0, px - x0);
    let mut acc = 0.0;
    for (yy, wy) in [(y0 as isize, 1.0 - ly), (y0 as isize + 1, ly)] {
        for (xx, wx) in [(x0 as isize, 1.0 - lx), (x0 as isize + 1, lx)] {
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                acc += wy * wx * plane[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

/// `[N, Cin, H, W] * [Cout, Cin, k, k]` cross-correlation, optionally with
/// per-tap `(dy, dx)` offsets `[N, 2k^2, Ho, Wo]`.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    off: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let &[n, cin, h, wd] = x.shape() else { panic!("rank") };
    let &[cout, _, k, _] = w.shape() else { panic!("rank") };
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let (xv, wv) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout * ho * wo];
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        let plane = &xv[(i * cin + ci) * h * wd..(i * cin + ci + 1) * h * wd];
                        for ky in 0..k {
                            for kx in 0..k {
                                let t = ky * k + kx;
                                let (mut py, mut px) =
                                    ((oy * stride + ky) as f64 - pad as f64, (ox * stride + kx) as f64 - pad as f64);
                                if let Some(o) = off {
                                    let base = (i * 2 * k * k + 2 * t) * ho * wo + oy * wo + ox;
                                    py += o.data()[base];
                                    px += o.data()[base + ho * wo];
                                }
                                let v = bilinear_px(plane, h, wd, py, px);
                                s += wv[((co * cin + ci) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                    out[((i * cout + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

/// Mean over each of `planes` contiguous `spatial`-length planes.
pub fn gap(x: &[f64], planes: usize, spatial: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * spatial..(p + 1) * spatial].iter().sum::<f64>() / spatial as f64)
        .collect()
}

/// `[C, H, W]` sampled at normalized `[Ho, Wo, 2]` (x, y) positions with
/// corners on pixel centres.
pub fn grid_sample(x: &[f64], c: usize, h: usize, w: usize, grid: &[f64], ho: usize, wo: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for p in 0..ho * wo {
            let px = (grid[2 * p] + 1.0) * (w - 1) as f64 / 2.0;
            let py = (grid[2 * p + 1] + 1.0) * (h - 1) as f64 / 2.0;
            out[ch * ho * wo + p] = bilinear_px(plane, h, w, py, px);
        }
    }
    out
}

/// `MT[i, j]` = cosine between query column i and support column j of
/// `[C, HW]` maps; norms are floored at `eps`.
pub fn correlation(fq: &[f64], fs: &[f64], c: usize, hw: usize, eps: f64) -> Vec<f64> {
    let norm = |f: &[f64], j: usize| (0..c).map(|ch| f[ch * hw + j].powi(2)).sum::<f64>().sqrt().max(eps);
    let mut out = vec![0.0; hw * hw];
    for i in 0..hw {
        for j in 0..hw {
            let dot: f64 = (0..c).map(|ch| fq[ch * hw + i] * fs[ch * hw + j]).sum();
            out[i * hw + j] = dot / (norm(fq, i) * norm(fs, j));
        }
    }
    out
}

/// `out[c, i] = sum_j M[i, j] fs[c, j]`.
pub fn transform(m: &[f64], fs: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] = (0..hw).map(|j| m[i * hw + j] * fs[ch * hw + j]).sum();
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Relative error with a floor on the scale so near-zero gradients are
/// compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub const FD_STEP: f64 = 1e-5;

/// Max relative error between backprop and central differences of the
/// scalar `f(inputs)`, over every element of every input.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vs).unwrap();
        g.value(y).data()[0]
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vs).unwrap();
    g.backward(y).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vs.iter().enumerate() {
        let analytic = g.grad(*v);
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[idx], numeric));
        }
    }
    worst
}

/// Scalar probe `sum(y * r)` with a fixed random weighting `r`, so every
/// output element contributes a distinct gradient.
pub fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = uniform(&mut rng(seed), &shape, -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}
