//! Short-range spatial manipulation: per-position offsets predicted from the
//! aligned support and query, applied through a rectified bilinear grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvInit, Ctx, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Base sampling grid `[H, W, 2]` with (x, y) channel order; (-1, -1) at the
/// top-left and (1, 1) at the bottom-right.
pub fn make_base_grid<T: Real>(h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 2 || w < 2 {
        return Err(Error::invalid("make_base_grid", format!("extent {h}x{w}; both must be >= 2")));
    }
    let lin = |i: usize, n: usize| T::from_f64((2 * i) as f64 / (n - 1) as f64 - 1.0);
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(lin(x, w));
            data.push(lin(y, h));
        }
    }
    Tensor::new(&[h, w, 2], data)
}

/// `h`: two [conv3x3, BN, ReLU] blocks then [conv3x3, tanh], widths
/// 2C -> C -> C/2 -> 2.
#[derive(Debug, Clone)]
pub struct OffsetPredictor {
    blocks: Vec<(Conv2d, BatchNorm)>,
    last: Conv2d,
}

impl OffsetPredictor {
    pub fn new(channels: usize) -> Self {
        let half = (channels / 2).max(1);
        Self {
            blocks: vec![
                (
                    Conv2d::new("ssm.h.conv1", 2 * channels, channels, 3, 1),
                    BatchNorm::new("ssm.h.bn1", channels),
                ),
                (
                    Conv2d::new("ssm.h.conv2", channels, half, 3, 1),
                    BatchNorm::new("ssm.h.bn2", half),
                ),
            ],
            last: Conv2d::new("ssm.h.conv3", half, 2, 3, 1),
        }
    }

    /// The final conv starts at zero so the initial offsets vanish.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (c, b) in &self.blocks {
            c.init(store, ConvInit::KaimingUniform, rng);
            b.init(store);
        }
        self.last.init(store, ConvInit::Zeros, rng);
    }

    /// Offsets `[P, 2, H, W]` (channel 0 = dx, 1 = dy) in (-1, 1).
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, aligned: Var, query: Var) -> Result<Var> {
        let (sa, sq) = (ctx.graph.shape(aligned), ctx.graph.shape(query));
        if sa != sq || sa.len() != 4 {
            return Err(Error::shape("predict_offsets", format!("{sa:?} (4-d)"), format!("{sq:?}")));
        }
        let mut x = ctx.graph.concat(aligned, query, 1)?;
        for (c, b) in &self.blocks {
            x = c.forward(ctx, x)?;
            x = b.forward(ctx, x)?;
            x = ctx.graph.relu(x);
        }
        let x = self.last.forward(ctx, x)?;
        Ok(ctx.graph.tanh(x))
    }
}

/// Rectified grid `base + scale * offsets` as `[P, H, W, 2]`.
pub fn rectified_grid<T: Real>(g: &mut Graph<T>, offsets: Var, scale: f64) -> Result<Var> {
    let s = g.shape(offsets).to_vec();
    let &[p, 2, h, w] = &s[..] else {
        return Err(Error::shape("rectified_grid", "[P, 2, H, W]", format!("{s:?}")));
    };
    let base = make_base_grid::<T>(h, w)?;
    let tiled: Vec<T> = (0..p).flat_map(|_| base.data().iter().copied()).collect();
    let base = g.constant(Tensor::new(&[p, h, w, 2], tiled)?);
    let off = g.channels_last(offsets)?;
    let off = g.affine(off, T::from_f64(scale), T::zero());
    g.add(base, off)
}

/// Bilinear re-sampling of the aligned support through a rectified grid.
pub fn resample<T: Real>(g: &mut Graph<T>, aligned: Var, grid: Var) -> Result<Var> {
    g.grid_sample(aligned, grid)
}

#[derive(Debug, Clone, Copy)]
pub struct SsmOutput {
    pub offsets: Var,
    pub resampled: Var,
}

#[derive(Debug, Clone)]
pub struct Ssm {
    pub predictor: OffsetPredictor,
    pub offset_scale: f64,
}

impl Ssm {
    pub const PREFIX: &'static str = "ssm.";

    pub fn new(channels: usize, offset_scale: f64) -> Self {
        Self {
            predictor: OffsetPredictor::new(channels),
            offset_scale,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.predictor.init(store, rng);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, aligned: Var, query: Var) -> Result<SsmOutput> {
        let offsets = self.predictor.forward(ctx, aligned, query)?;
        let grid = rectified_grid(&mut ctx.graph, offsets, self.offset_scale)?;
        let resampled = resample(&mut ctx.graph, aligned, grid)?;
        Ok(SsmOutput { offsets, resampled })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_grid_examples() {
        let g = make_base_grid::<f64>(2, 2).unwrap();
        assert_eq!(g.to_f64_vec(), vec![-1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0, 1.0]);
        let g = make_base_grid::<f64>(3, 3).unwrap();
        assert_eq!((g.at(&[1, 1, 0]), g.at(&[1, 1, 1])), (0.0, 0.0));
        let g = make_base_grid::<f64>(2, 3).unwrap();
        for y in 0..2 {
            let xs: Vec<f64> = (0..3).map(|x| g.at(&[y, x, 0])).collect();
            assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
        }
        assert!(make_base_grid::<f64>(1, 4).is_err());
    }
}
