//! Long-range semantic correspondence: a query-by-support cosine correlation
//! matrix, row-normalized with a softmax, used to rebuild every query
//! position as a convex combination of support positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::foe::COSINE_EPS;
use crate::nn::{BatchNorm, Conv2d, ConvInit, Ctx, ParamStore};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformSource {
    /// Rearrange the full-channel (mask re-weighted) support features.
    Full,
    /// Rearrange the projected support features.
    Projected,
}

/// `g`: 1x1 conv, batch norm, ReLU, 1x1 conv.
#[derive(Debug, Clone)]
pub struct Projector {
    conv1: Conv2d,
    bn: BatchNorm,
    conv2: Conv2d,
}

impl Projector {
    pub fn new(channels: usize, reduced: usize) -> Self {
        Self {
            conv1: Conv2d::new("lsc.proj.conv1", channels, reduced, 1, 0),
            bn: BatchNorm::new("lsc.proj.bn", reduced),
            conv2: Conv2d::new("lsc.proj.conv2", reduced, reduced, 1, 0),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv1.init(store, ConvInit::KaimingUniform, rng);
        self.bn.init(store);
        self.conv2.init(store, ConvInit::KaimingUniform, rng);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let x = self.conv1.forward(ctx, f)?;
        let x = self.bn.forward(ctx, x)?;
        let x = ctx.graph.relu(x);
        self.conv2.forward(ctx, x)
    }
}

fn split_map(op: &'static str, s: &[usize]) -> Result<(Vec<usize>, usize, usize, usize)> {
    match s.len() {
        3 | 4 => {
            let r = s.len();
            Ok((s[..r - 3].to_vec(), s[r - 3], s[r - 2], s[r - 1]))
        }
        _ => Err(Error::shape(op, "[C, H, W] or [P, C, H, W]", format!("{s:?}"))),
    }
}

/// Raw correlation `MT[i, j] = cos(query column i, support column j)`,
/// shape `[.., HW, HW]`.
pub fn correlation<T: Real>(g: &mut Graph<T>, fq: Var, fs: Var) -> Result<Var> {
    let (sq, ss) = (g.shape(fq).to_vec(), g.shape(fs).to_vec());
    if sq != ss {
        return Err(Error::shape("correlation", format!("{sq:?}"), format!("{ss:?}")));
    }
    let (lead, c, h, w) = split_map("correlation", &sq)?;
    let axis = lead.len();
    let eps = T::from_f64(COSINE_EPS);
    let flat = [lead.clone(), vec![c, h * w]].concat();
    let q = g.l2_normalize(fq, axis, eps)?;
    let q = g.reshape(q, &flat)?;
    let q = g.transpose(q)?;
    let s = g.l2_normalize(fs, axis, eps)?;
    let s = g.reshape(s, &flat)?;
    g.matmul(q, s)
}

/// Row-wise softmax: each query position gets a distribution over support
/// positions.
pub fn normalize<T: Real>(g: &mut Graph<T>, raw: Var) -> Result<Var> {
    g.softmax(raw)
}

/// `out[:, i] = sum_j M[i, j] * fs[:, j]` for `[.., C, H, W]` support features
/// and a `[.., HW, HW]` row-stochastic matrix.
pub fn transform<T: Real>(g: &mut Graph<T>, m: Var, fs: Var) -> Result<Var> {
    let ss = g.shape(fs).to_vec();
    let (lead, c, h, w) = split_map("transform", &ss)?;
    let hw = h * w;
    let want = [lead.clone(), vec![hw, hw]].concat();
    if g.shape(m) != want.as_slice() {
        return Err(Error::shape("transform", format!("{want:?}"), format!("{:?}", g.shape(m))));
    }
    let s = g.reshape(fs, &[lead, vec![c, hw]].concat())?;
    let mt = g.transpose(m)?;
    let out = g.matmul(s, mt)?;
    g.reshape(out, &ss)
}

/// Output of [`Lsc::forward`], kept for inspection and visualization.
#[derive(Debug, Clone, Copy)]
pub struct LscOutput {
    pub raw: Var,
    pub normalized: Var,
    pub aligned: Var,
}

#[derive(Debug, Clone)]
pub struct Lsc {
    pub projector: Projector,
    pub source: TransformSource,
}

impl Lsc {
    pub const PREFIX: &'static str = "lsc.";

    pub fn new(channels: usize, reduced: usize, source: TransformSource) -> Self {
        Self {
            projector: Projector::new(channels, reduced),
            source,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.projector.init(store, rng);
    }

    /// Aligns `[P, C, H, W]` support features to paired query features.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, fs: Var, fq: Var) -> Result<LscOutput> {
        let ps = self.projector.forward(ctx, fs)?;
        let pq = self.projector.forward(ctx, fq)?;
        let raw = correlation(&mut ctx.graph, pq, ps)?;
        let normalized = normalize(&mut ctx.graph, raw)?;
        let src = match self.source {
            TransformSource::Full => fs,
            TransformSource::Projected => ps,
        };
        let aligned = transform(&mut ctx.graph, normalized, src)?;
        Ok(LscOutput {
            raw,
            normalized,
            aligned,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn normalize_examples() {
        let mut g = Graph::<f64>::new();
        let raw = g.constant(Tensor::from_f64(&[2, 3], &[2f64.ln(), 0.0, 0.0, 50.0, 0.0, 0.0]).unwrap());
        let m = normalize(&mut g, raw).unwrap();
        let v = g.value(m).to_f64_vec();
        for (a, b) in v[..3].iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((v[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_matrix_collapses_to_mean() {
        let mut g = Graph::<f64>::new();
        let fs = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap());
        let m = g.constant(Tensor::full(&[4, 4], 0.25));
        let out = transform(&mut g, m, fs).unwrap();
        for v in g.value(out).to_f64_vec() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transform_rejects_mismatched_matrix() {
        let mut g = Graph::<f64>::new();
        let fs = g.constant(Tensor::zeros(&[2, 2, 2]));
        let m = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(transform(&mut g, m, fs), Err(Error::Shape { .. })));
    }

    #[test]
    fn orthogonal_supports_give_zero_matrix() {
        let mut g = Graph::<f64>::new();
        let fq = g.constant(Tensor::from_f64(&[2, 1, 2], &[1.0, 2.0, 0.0, 0.0]).unwrap());
        let fs = g.constant(Tensor::from_f64(&[2, 1, 2], &[0.0, 0.0, 1.0, -1.0]).unwrap());
        let mt = correlation(&mut g, fq, fs).unwrap();
        assert!(g.value(mt).to_f64_vec().iter().all(|v| v.abs() < 1e-15));
    }
}
