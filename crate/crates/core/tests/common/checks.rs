//! Reusable check suites: oracle equivalence, gradient agreement and
//! algebraic invariants. Each returns measurements; callers assert.

use rand::Rng;
use spalign::backbone::BackboneConfig;
use spalign::foe::{soft_mask, COSINE_EPS};
use spalign::lsc::{correlation, normalize, transform};
use spalign::meta::{argmax, prototype_probabilities, AlignNet, ModelConfig, Stage};
use spalign::nn::{Ctx, ParamStore};
use spalign::ssm::{rectified_grid, resample};
use spalign::tensor::Tensor;
use spalign::{Graph, Var};

use super::*;

pub struct OracleReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_err: f64,
}

pub const ORACLE_INSTANCES: usize = 24;

fn dims(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.gen_range(1..5), r.gen_range(2..7), r.gen_range(2..7))
}

/// Every kernel against its nested-loop reference on random 64-bit inputs.
pub fn oracle_suite(seed: u64) -> Vec<OracleReport> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut run = |op: &'static str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let max_err = (0..ORACLE_INSTANCES).map(|_| f(&mut r)).fold(0.0, f64::max);
        out.push(OracleReport {
            op,
            instances: ORACLE_INSTANCES,
            max_err,
        });
    };

    run("conv2d", &mut |r| {
        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let k = [1, 3][r.gen_range(0..2)];
        let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..2));
        let (h, w) = (r.gen_range(k..k + 5), r.gen_range(k..k + 5));
        let x = uniform(r, &[n, cin, h, w], -1.0, 1.0);
        let wt = uniform(r, &[cout, cin, k, k], -1.0, 1.0);
        let b = uniform(r, &[cout], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        max_abs_diff(g.value(y).data(), &conv2d(&x, &wt, Some(&b), None, stride, pad))
    });

    run("matmul", &mut |r| {
        let (m, k, n) = (r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..9));
        let a = uniform(r, &[m, k], -2.0, 2.0);
        let b = uniform(r, &[k, n], -2.0, 2.0);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(av, bv).unwrap();
        max_abs_diff(g.value(y).data(), &matmul(a.data(), b.data(), m, k, n))
    });

    run("gap", &mut |r| {
        let (c, h, w) = dims(r);
        let n = r.gen_range(1..4);
        let x = uniform(r, &[n, c, h, w], -3.0, 3.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.gap(xv).unwrap();
        max_abs_diff(g.value(y).data(), &gap(x.data(), n * c, h * w))
    });

    run("bilinear_sample", &mut |r| {
        let (c, h, w) = dims(r);
        let (ho, wo) = (r.gen_range(1..6), r.gen_range(1..6));
        let x = uniform(r, &[c, h, w], -1.0, 1.0);
        let grid = uniform(r, &[ho, wo, 2], -1.3, 1.3);
        let mut g = Graph::new();
        let (xv, gv) = (g.constant(x.clone()), g.constant(grid.clone()));
        let y = g.grid_sample(xv, gv).unwrap();
        max_abs_diff(g.value(y).data(), &super::grid_sample(x.data(), c, h, w, grid.data(), ho, wo))
    });

    run("deform_conv", &mut |r| {
        let (n, cin, cout, k) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), 3);
        let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
        let pad = 1;
        let x = uniform(r, &[n, cin, h, w], -1.0, 1.0);
        let wt = uniform(r, &[cout, cin, k, k], -1.0, 1.0);
        let b = uniform(r, &[cout], -1.0, 1.0);
        let off = uniform(r, &[n, 2 * k * k, h, w], -2.0, 2.0);
        let mut g = Graph::new();
        let (xv, wv, bv, ov) = (
            g.constant(x.clone()),
            g.constant(wt.clone()),
            g.constant(b.clone()),
            g.constant(off.clone()),
        );
        let y = g.deform_conv2d(xv, ov, wv, Some(bv), 1, pad).unwrap();
        max_abs_diff(g.value(y).data(), &conv2d(&x, &wt, Some(&b), Some(&off), 1, pad))
    });

    run("correlation", &mut |r| {
        let (c, h, w) = dims(r);
        let fq = uniform(r, &[c, h, w], -1.0, 1.0);
        let fs = uniform(r, &[c, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let (q, s) = (g.constant(fq.clone()), g.constant(fs.clone()));
        let y = correlation(&mut g, q, s).unwrap();
        max_abs_diff(g.value(y).data(), &super::correlation(fq.data(), fs.data(), c, h * w, COSINE_EPS))
    });

    run("transform", &mut |r| {
        let (c, h, w) = dims(r);
        let hw = h * w;
        let raw = uniform(r, &[hw, hw], -3.0, 3.0);
        let m = Tensor::new(&[hw, hw], softmax_rows(raw.data(), hw)).unwrap();
        let fs = uniform(r, &[c, h, w], -1.0, 1.0);
        let mut g = Graph::new();
        let (mv, sv) = (g.constant(m.clone()), g.constant(fs.clone()));
        let y = transform(&mut g, mv, sv).unwrap();
        max_abs_diff(g.value(y).data(), &super::transform(m.data(), fs.data(), c, hw))
    });

    out
}

type Probe = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> spalign::Result<Var>>;

/// One named gradient probe: inputs and the scalar function of them.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Probe,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> spalign::Result<Var> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Gradient probes for every differentiable tape operation and for the
/// composite alignment functions.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let u = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);
    let pos = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, 0.5, 1.5);
    let mut v = Vec::new();
    v.push(case("add", vec![u(&mut r, &[2, 3]), u(&mut r, &[2, 3])], |g, x| {
        let y = g.add(x[0], x[1])?;
        probe(g, y, 1)
    }));
    v.push(case("sub", vec![u(&mut r, &[2, 3]), u(&mut r, &[2, 3])], |g, x| {
        let y = g.sub(x[0], x[1])?;
        probe(g, y, 2)
    }));
    v.push(case("mul", vec![u(&mut r, &[2, 3]), u(&mut r, &[2, 3])], |g, x| {
        let y = g.mul(x[0], x[1])?;
        probe(g, y, 3)
    }));
    v.push(case("affine", vec![u(&mut r, &[4])], |g, x| {
        let y = g.affine(x[0], -1.7, 0.3);
        probe(g, y, 4)
    }));
    v.push(case("relu", vec![u(&mut r, &[3, 4])], |g, x| {
        let y = g.relu(x[0]);
        probe(g, y, 5)
    }));
    v.push(case("clamp", vec![u(&mut r, &[3, 4])], |g, x| {
        let y = g.clamp(x[0], -0.5, 0.5);
        probe(g, y, 40)
    }));
    v.push(case("tanh", vec![u(&mut r, &[3, 4])], |g, x| {
        let y = g.tanh(x[0]);
        probe(g, y, 6)
    }));
    v.push(case("sum", vec![u(&mut r, &[2, 2])], |g, x| {
        let y = g.mul(x[0], x[0])?;
        Ok(g.sum(y))
    }));
    v.push(case("mean", vec![u(&mut r, &[2, 3])], |g, x| {
        let y = g.tanh(x[0]);
        Ok(g.mean(y))
    }));
    v.push(case("sum_last", vec![u(&mut r, &[3, 4])], |g, x| {
        let y = g.sum_last(x[0])?;
        probe(g, y, 7)
    }));
    v.push(case("reshape", vec![u(&mut r, &[2, 6])], |g, x| {
        let y = g.reshape(x[0], &[3, 4])?;
        probe(g, y, 8)
    }));
    v.push(case("transpose", vec![u(&mut r, &[2, 3, 4])], |g, x| {
        let y = g.transpose(x[0])?;
        probe(g, y, 9)
    }));
    v.push(case("matmul", vec![u(&mut r, &[2, 3, 4]), u(&mut r, &[2, 4, 5])], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        probe(g, y, 10)
    }));
    v.push(case(
        "conv2d",
        vec![u(&mut r, &[2, 2, 5, 5]), u(&mut r, &[3, 2, 3, 3]), u(&mut r, &[3])],
        |g, x| {
            let y = g.conv2d(x[0], x[1], Some(x[2]), 2, 1)?;
            probe(g, y, 11)
        },
    ));
    v.push(case(
        "deform_conv",
        vec![
            u(&mut r, &[1, 2, 4, 4]),
            uniform(&mut r, &[1, 18, 4, 4], -0.9, 0.9),
            u(&mut r, &[2, 2, 3, 3]),
            u(&mut r, &[2]),
        ],
        |g, x| {
            let y = g.deform_conv2d(x[0], x[1], x[2], Some(x[3]), 1, 1)?;
            probe(g, y, 12)
        },
    ));
    v.push(case("max_pool2", vec![u(&mut r, &[1, 2, 4, 5])], |g, x| {
        let y = g.max_pool2(x[0])?;
        probe(g, y, 13)
    }));
    v.push(case(
        "batch_norm_train",
        vec![u(&mut r, &[3, 2, 2, 2]), pos(&mut r, &[2]), u(&mut r, &[2])],
        |g, x| {
            let (y, _) = g.batch_norm_train(x[0], x[1], x[2], 1e-5)?;
            probe(g, y, 14)
        },
    ));
    v.push(case(
        "batch_norm_eval",
        vec![u(&mut r, &[2, 2, 2, 2]), pos(&mut r, &[2]), u(&mut r, &[2])],
        |g, x| {
            let y = g.batch_norm_eval(x[0], x[1], x[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5)?;
            probe(g, y, 15)
        },
    ));
    v.push(case("gap", vec![u(&mut r, &[2, 3, 2, 3])], |g, x| {
        let y = g.gap(x[0])?;
        probe(g, y, 16)
    }));
    v.push(case("concat", vec![u(&mut r, &[2, 3]), u(&mut r, &[2, 2])], |g, x| {
        let y = g.concat(x[0], x[1], 1)?;
        probe(g, y, 17)
    }));
    v.push(case("softmax", vec![u(&mut r, &[3, 4])], |g, x| {
        let y = g.softmax(x[0])?;
        probe(g, y, 18)
    }));
    v.push(case("log_softmax", vec![u(&mut r, &[3, 4])], |g, x| {
        let y = g.log_softmax(x[0])?;
        probe(g, y, 19)
    }));
    v.push(case("l2_normalize", vec![u(&mut r, &[2, 3, 4])], |g, x| {
        let y = g.l2_normalize(x[0], 1, 1e-12)?;
        probe(g, y, 20)
    }));
    v.push(case("scale_spatial", vec![u(&mut r, &[2, 3, 2, 2]), u(&mut r, &[2, 1, 2, 2])], |g, x| {
        let y = g.scale_spatial(x[0], x[1])?;
        probe(g, y, 21)
    }));
    v.push(case(
        "bilinear_sample",
        vec![u(&mut r, &[2, 2, 3, 4]), uniform(&mut r, &[2, 3, 3, 2], -0.95, 0.95)],
        |g, x| {
            let y = g.grid_sample(x[0], x[1])?;
            probe(g, y, 22)
        },
    ));
    v.push(case("channels_last", vec![u(&mut r, &[2, 3, 2, 2])], |g, x| {
        let y = g.channels_last(x[0])?;
        probe(g, y, 23)
    }));
    v.push(case("index_select", vec![u(&mut r, &[3, 2])], |g, x| {
        let y = g.index_select(x[0], &[2, 0, 2])?;
        probe(g, y, 24)
    }));
    v.push(case("pick", vec![u(&mut r, &[3, 4])], |g, x| {
        let y = g.pick(x[0], &[1, 3, 0])?;
        probe(g, y, 25)
    }));
    v.push(case("add_bias", vec![u(&mut r, &[3, 4]), u(&mut r, &[4])], |g, x| {
        let y = g.add_bias(x[0], x[1])?;
        probe(g, y, 26)
    }));
    v.push(case("correlation", vec![u(&mut r, &[3, 2, 3]), u(&mut r, &[3, 2, 3])], |g, x| {
        let y = correlation(g, x[0], x[1])?;
        probe(g, y, 27)
    }));
    v.push(case("transform", vec![u(&mut r, &[6, 6]), u(&mut r, &[2, 2, 3])], |g, x| {
        let m = g.softmax(x[0])?;
        let y = transform(g, m, x[1])?;
        probe(g, y, 28)
    }));
    v.push(case("soft_mask", vec![u(&mut r, &[1, 3, 2, 3])], |g, x| {
        let y = soft_mask(g, x[0])?;
        probe(g, y, 29)
    }));
    v.push(case(
        "rectified_resample",
        vec![u(&mut r, &[1, 2, 3, 3]), uniform(&mut r, &[1, 2, 3, 3], -0.3, 0.3)],
        |g, x| {
            let grid = rectified_grid(g, x[1], 0.4)?;
            let y = resample(g, x[0], grid)?;
            probe(g, y, 30)
        },
    ));
    v
}

/// Tiny full model for the end-to-end loss check: 32x32 input gives a 4x4
/// feature extent.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            block_channels: [4; 4],
            input_size: 32,
        },
        head_classes: 2,
        ..ModelConfig::default()
    }
}

/// Backprop against central differences for the episode loss of the full
/// model on a 2-way 1-shot episode with one query per class, over every
/// trainable parameter. Returns (max relative error, parameters checked).
pub fn full_loss_gradcheck(seed: u64) -> (f64, usize) {
    let net = AlignNet::new(toy_model()).unwrap();
    assert_eq!(net.config.backbone.feature_extent(), 4);
    let mut r = rng(seed);
    let mut params: ParamStore<f64> = net.init(&mut r);
    params.remove_prefix("head.");
    // Zero-initialized offset heads and biases sit exactly on bilinear and
    // cosine-normalization kinks; a random nudge moves to a generic point.
    for name in params.trainable_names() {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let images = uniform(&mut r, &[4, 3, 32, 32], -1.0, 1.0);
    let (support, query) = ([0usize, 1], [0usize, 1]);
    let loss_of = |p: &ParamStore<f64>| -> f64 {
        let mut ctx = Ctx::new(p, true, false);
        let x = ctx.input(images.clone());
        let (l, _) = net.episode_loss(&mut ctx, x, &support, &query, 2, Stage::FULL).unwrap();
        ctx.graph.value(l).data()[0]
    };
    let mut ctx = Ctx::training(&params);
    let x = ctx.input(images.clone());
    let (l, _) = net.episode_loss(&mut ctx, x, &support, &query, 2, Stage::FULL).unwrap();
    ctx.graph.backward(l).unwrap();
    let grads = ctx.param_grads();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for name in params.trainable_names() {
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(params.get(&name).unwrap().shape()));
        for i in 0..analytic.len() {
            let mut p = params.clone();
            p.get_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let up = loss_of(&p);
            p.get_mut(&name).unwrap().data_mut()[i] -= 2.0 * FD_STEP;
            let down = loss_of(&p);
            let e = rel_err(analytic.data()[i], (up - down) / (2.0 * FD_STEP));
            if e > 1e-4 && std::env::var("GC_DEBUG").is_ok() {
                eprintln!("{name}[{i}] analytic {} numeric {}", analytic.data()[i], (up - down) / (2.0 * FD_STEP));
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}

// Invariant checks on one random instance each; `Err` describes a violation.

pub fn check_normalized_correlation(seed: u64, c: usize, h: usize, w: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let scale = r.gen_range(0.1..5.0);
    let fq = uniform(&mut r, &[c, h, w], -scale, scale);
    let fs = uniform(&mut r, &[c, h, w], -scale, scale);
    let mut g = Graph::new();
    let (q, s) = (g.constant(fq), g.constant(fs));
    let raw = correlation(&mut g, q, s).map_err(|e| e.to_string())?;
    let m = normalize(&mut g, raw).map_err(|e| e.to_string())?;
    let hw = h * w;
    for row in g.value(m).data().chunks(hw) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("row sums to {sum}"));
        }
        // A single-column row is exactly 1; wider rows lie strictly inside.
        if let Some(v) = row.iter().find(|&&v| !(v > 0.0 && v < 1.0) && !(hw == 1 && v == 1.0)) {
            return Err(format!("entry {v} outside (0, 1)"));
        }
    }
    Ok(())
}

pub fn check_soft_mask_range(seed: u64, c: usize, h: usize, w: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let phi = uniform(&mut r, &[2, c, h, w], -3.0, 3.0);
    let mut g = Graph::new();
    let p = g.constant(phi);
    let m = soft_mask(&mut g, p).map_err(|e| e.to_string())?;
    match g.value(m).data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        Some(v) => Err(format!("mask value {v}")),
        None => Ok(()),
    }
}

pub fn check_transform_convex(seed: u64, c: usize, h: usize, w: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let hw = h * w;
    let raw = uniform(&mut r, &[hw, hw], -4.0, 4.0);
    let fs = uniform(&mut r, &[c, h, w], -2.0, 2.0);
    let mut g = Graph::new();
    let (rv, sv) = (g.constant(raw), g.constant(fs.clone()));
    let m = g.softmax(rv).map_err(|e| e.to_string())?;
    let y = transform(&mut g, m, sv).map_err(|e| e.to_string())?;
    let out = g.value(y).data();
    for ch in 0..c {
        let plane = &fs.data()[ch * hw..(ch + 1) * hw];
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in &out[ch * hw..(ch + 1) * hw] {
            if v < lo - 1e-6 || v > hi + 1e-6 {
                return Err(format!("channel {ch}: {v} outside [{lo}, {hi}]"));
            }
        }
    }
    Ok(())
}

pub fn check_zero_offset_ssm_identity(seed: u64, c: usize, h: usize, w: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let p = r.gen_range(1..3);
    let a = uniform(&mut r, &[p, c, h, w], -2.0, 2.0);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let off = g.constant(Tensor::zeros(&[p, 2, h, w]));
    let scale = r.gen_range(0.0..2.0);
    let grid = rectified_grid(&mut g, off, scale).map_err(|e| e.to_string())?;
    let y = resample(&mut g, av, grid).map_err(|e| e.to_string())?;
    if g.value(y).data() == a.data() {
        Ok(())
    } else {
        Err(format!("max deviation {}", max_abs_diff(g.value(y).data(), a.data())))
    }
}

pub fn check_zero_offset_deform_is_conv(seed: u64, c: usize, h: usize, w: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let (h, w) = (h.max(3), w.max(3));
    let cout = r.gen_range(1..4);
    let x = uniform(&mut r, &[1, c, h, w], -1.0, 1.0);
    let wt = uniform(&mut r, &[cout, c, 3, 3], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(wt));
    let off = g.constant(Tensor::zeros(&[1, 18, h, w]));
    let a = g.conv2d(xv, wv, None, 1, 1).map_err(|e| e.to_string())?;
    let b = g.deform_conv2d(xv, off, wv, None, 1, 1).map_err(|e| e.to_string())?;
    if g.value(a).data() == g.value(b).data() {
        Ok(())
    } else {
        Err(format!("max deviation {}", max_abs_diff(g.value(a).data(), g.value(b).data())))
    }
}

pub fn check_scaled_distance_argmax(seed: u64, n_way: usize) -> Result<(), String> {
    let mut r = rng(seed);
    let d2: Vec<f64> = (0..n_way).map(|_| r.gen_range(0.0..10.0)).collect();
    let k = r.gen_range(0.01..100.0);
    let scaled: Vec<f64> = d2.iter().map(|d| d * k).collect();
    let (a, b) = (argmax(&prototype_probabilities(&d2)), argmax(&prototype_probabilities(&scaled)));
    if a == b {
        Ok(())
    } else {
        Err(format!("argmax {a} became {b} under scale {k}"))
    }
}
