use rand::Rng;

use super::{Ctx, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Tensor, Var};

const BN_EPS: f64 = 1e-5;

fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvInit {
    KaimingUniform,
    Zeros,
    /// Centre tap carries an identity channel map (requires `cin == cout`).
    Identity,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            pad,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, how: ConvInit, rng: &mut impl Rng) {
        let shape = [self.cout, self.cin, self.k, self.k];
        let w = match how {
            ConvInit::KaimingUniform => kaiming_uniform(&shape, self.cin * self.k * self.k, rng),
            ConvInit::Zeros => Tensor::zeros(&shape),
            ConvInit::Identity => {
                let mut w = Tensor::zeros(&shape);
                let c = self.k / 2;
                for o in 0..self.cout.min(self.cin) {
                    let idx = ((o * self.cin + o) * self.k + c) * self.k + c;
                    w.data_mut()[idx] = T::one();
                }
                w
            }
        };
        store.insert(self.weight_name(), w, true);
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]), true);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = ctx.param(&self.bias_name())?;
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        let c = [self.channels];
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&c), true);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&c), true);
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(&c), false);
        store.insert(format!("{}.running_var", self.name), Tensor::ones(&c), false);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        let eps = T::from_f64(BN_EPS);
        if ctx.is_training() {
            let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, eps)?;
            ctx.record_bn(&self.name, stats);
            Ok(y)
        } else {
            let store = ctx.store();
            let rm = store.get(&format!("{}.running_mean", self.name))?.data().to_vec();
            let rv = store.get(&format!("{}.running_var", self.name))?.data().to_vec();
            ctx.graph.batch_norm_eval(x, gamma, beta, &rm, &rv, eps)
        }
    }
}

/// Fully connected layer on `[B, D_in]` rows; weight stored `[D_in, D_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let bound = 1.0 / (self.din.max(1) as f64).sqrt();
        let data = (0..self.din * self.dout)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        store.insert(
            format!("{}.weight", self.name),
            Tensor::new(&[self.din, self.dout], data).expect("init shape"),
            true,
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dout]), true);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        let y = ctx.graph.matmul(x, w)?;
        ctx.graph.add_bias(y, b)
    }
}
