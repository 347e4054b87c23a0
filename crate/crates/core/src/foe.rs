//! Foreground object enhancement: a deformable refinement followed by a
//! cosine-similarity soft mask against the globally pooled descriptor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvInit, Ctx, ParamStore};
use crate::tensor::{Graph, Real, Var};

/// Guard for zero-norm vectors in cosine computations.
pub const COSINE_EPS: f64 = 1e-12;

/// Deformable 3x3 convolution (offsets only, no modulation).
#[derive(Debug, Clone)]
pub struct DeformableBlock {
    pub offset_predictor: Conv2d,
    pub main: Conv2d,
    pub k: usize,
}

impl DeformableBlock {
    pub fn new(name: &str, channels: usize, k: usize) -> Self {
        Self {
            offset_predictor: Conv2d::new(format!("{name}.offset"), channels, 2 * k * k, k, k / 2),
            main: Conv2d::new(format!("{name}.main"), channels, channels, k, k / 2),
            k,
        }
    }

    /// Offsets start at zero; the main kernel starts as the identity map so
    /// that a freshly attached block passes pretrained features through.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.offset_predictor.init(store, ConvInit::Zeros, rng);
        self.main.init(store, ConvInit::Identity, rng);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let s = ctx.graph.shape(f);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h < self.k || w < self.k {
            return Err(Error::shape(
                "deform_conv",
                format!("spatial extent >= {}", self.k),
                format!("{s:?}"),
            ));
        }
        let off = self.offset_predictor.forward(ctx, f)?;
        let wt = ctx.param(&self.main.weight_name())?;
        let b = ctx.param(&self.main.bias_name())?;
        ctx.graph.deform_conv2d(f, off, wt, Some(b), 1, self.k / 2)
    }
}

/// Normalized soft mask `(cos(gap(f), f[:, y, x]) + 1) / 2` for `[.., C, H, W]`
/// features; output `[.., 1, H, W]` in [0, 1].
pub fn soft_mask<T: Real>(g: &mut Graph<T>, phi: Var) -> Result<Var> {
    let s = g.shape(phi).to_vec();
    let r = s.len();
    if r != 3 && r != 4 {
        return Err(Error::shape("soft_mask", "[C, H, W] or [N, C, H, W]", format!("{s:?}")));
    }
    let lead = s[..r - 3].to_vec();
    let (c, h, w) = (s[r - 3], s[r - 2], s[r - 1]);
    let eps = T::from_f64(COSINE_EPS);
    let u = g.gap(phi)?;
    let u = g.l2_normalize(u, r - 3, eps)?;
    let u = g.reshape(u, &[lead.clone(), vec![1, c]].concat())?;
    let local = g.l2_normalize(phi, r - 3, eps)?;
    let local = g.reshape(local, &[lead.clone(), vec![c, h * w]].concat())?;
    let cos = g.matmul(u, local)?;
    let cos = g.reshape(cos, &[lead, vec![1, h, w]].concat())?;
    // Unit-vector dot products can overshoot 1 by rounding.
    let cos = g.clamp(cos, -T::one(), T::one());
    let half = T::from_f64(0.5);
    Ok(g.affine(cos, half, half))
}

/// Spatial re-weighting: every channel at (y, x) scaled by `mask[y, x]`.
pub fn apply_mask<T: Real>(g: &mut Graph<T>, phi: Var, mask: Var) -> Result<Var> {
    g.scale_spatial(phi, mask)
}

#[derive(Debug, Clone)]
pub struct Foe {
    pub deform: Option<DeformableBlock>,
    pub use_mask: bool,
}

impl Foe {
    pub const PREFIX: &'static str = "foe.";

    pub fn new(channels: usize, use_deform: bool, use_mask: bool) -> Self {
        Self {
            deform: use_deform.then(|| DeformableBlock::new("foe.deform", channels, 3)),
            use_mask,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        if let Some(d) = &self.deform {
            d.init(store, rng);
        }
    }

    /// Returns `(refined, mask)` where `refined` is the re-weighted feature.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<(Var, Option<Var>)> {
        let phi = match &self.deform {
            Some(d) => d.forward(ctx, f)?,
            None => f,
        };
        if !self.use_mask {
            return Ok((phi, None));
        }
        let mask = soft_mask(&mut ctx.graph, phi)?;
        Ok((apply_mask(&mut ctx.graph, phi, mask)?, Some(mask)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mask_of(shape: &[usize], data: &[f64]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_f64(shape, data).unwrap());
        let m = soft_mask(&mut g, f).unwrap();
        g.value(m).to_f64_vec()
    }

    #[test]
    fn constant_feature_gives_unit_mask() {
        let m = mask_of(&[2, 2, 2], &[1.0, 1.0, 1.0, 1.0, -3.0, -3.0, -3.0, -3.0]);
        assert!(m.iter().all(|&v| (v - 1.0).abs() < 1e-12), "{m:?}");
    }

    #[test]
    fn antipodal_local_vector_gives_zero() {
        // columns [1, 0], [3, 0], [-1, 0]: u = [1, 0]; third column is -u
        let m = mask_of(&[2, 1, 3], &[1.0, 3.0, -1.0, 0.0, 0.0, 0.0]);
        assert!((m[2] - 0.0).abs() < 1e-12);
        assert!((m[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_orthogonal_columns() {
        // columns [1, 0] and [0, 1]: u = [0.5, 0.5], both cosines sqrt(2)/2
        let m = mask_of(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let want = (1.0 + 2f64.sqrt() / 2.0) / 2.0;
        assert!((want - 0.853_553_390_593_273_8).abs() < 1e-15);
        for v in m {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_never_exceeds_one() {
        // u equals the only local column, whose self-cosine can round past 1
        for k in 1..200 {
            let x = k as f64 * 0.137;
            let m = mask_of(&[3, 1, 1], &[x, 1.0 / x, x.sin()]);
            assert!(m[0] <= 1.0 && m[0] > 1.0 - 1e-12, "{}", m[0]);
        }
    }

    #[test]
    fn zero_local_vector_gives_half() {
        let m = mask_of(&[2, 1, 2], &[1.0, 0.0, 1.0, 0.0]);
        assert!((m[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn apply_mask_rejects_extent_mismatch() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[2, 3, 3]));
        let m = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(apply_mask(&mut g, f, m), Err(Error::Shape { .. })));
    }
}
