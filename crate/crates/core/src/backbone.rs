//! Conv-64 style feature extractor with the trailing pooling removed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvInit, Ctx, ParamStore};
use crate::tensor::{Real, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub block_channels: [usize; 4],
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            block_channels: [64; 4],
            input_size: 84,
        }
    }
}

/// Whether block `i` ends with a 2x2 max pool. The fourth pool is dropped
/// to keep spatial resolution (84 -> 42 -> 21 -> 10 -> 10).
const POOLED: [bool; 4] = [true, true, true, false];

impl BackboneConfig {
    pub fn feature_channels(&self) -> usize {
        self.block_channels[3]
    }

    pub fn feature_extent(&self) -> usize {
        POOLED
            .iter()
            .fold(self.input_size, |s, &pooled| if pooled { s / 2 } else { s })
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if self.feature_extent() < 4 {
            return Err(Error::Config(format!(
                "input size {} yields feature extent {} (< 4)",
                self.input_size,
                self.feature_extent()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    blocks: Vec<(Conv2d, BatchNorm, bool)>,
}

impl Backbone {
    pub const PREFIX: &'static str = "backbone.";

    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = config.in_channels;
        let blocks = config
            .block_channels
            .iter()
            .zip(POOLED)
            .enumerate()
            .map(|(i, (&cout, pooled))| {
                let conv = Conv2d::new(format!("backbone.block{i}.conv"), cin, cout, 3, 1);
                let bn = BatchNorm::new(format!("backbone.block{i}.bn"), cout);
                cin = cout;
                (conv, bn, pooled)
            })
            .collect();
        Ok(Self { config, blocks })
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (conv, bn, _) in &self.blocks {
            conv.init(store, ConvInit::KaimingUniform, rng);
            bn.init(store);
        }
    }

    /// `[N, in_channels, S, S]` images to `[N, C, H, W]` features.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let s = ctx.graph.shape(images).to_vec();
        let (c, sz) = (self.config.in_channels, self.config.input_size);
        if s.len() != 4 || s[1] != c || s[2] != sz || s[3] != sz {
            return Err(Error::shape(
                "backbone",
                format!("[N, {c}, {sz}, {sz}]"),
                format!("{s:?}"),
            ));
        }
        let mut x = images;
        for (conv, bn, pooled) in &self.blocks {
            x = conv.forward(ctx, x)?;
            x = bn.forward(ctx, x)?;
            x = ctx.graph.relu(x);
            if *pooled {
                x = ctx.graph.max_pool2(x)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_arithmetic() {
        assert_eq!(BackboneConfig::default().feature_extent(), 10);
        let c = |s| BackboneConfig {
            input_size: s,
            ..Default::default()
        };
        assert_eq!(c(42).feature_extent(), 5);
        assert_eq!(c(32).feature_extent(), 4);
        assert!(c(24).validate().is_err());
    }
}
