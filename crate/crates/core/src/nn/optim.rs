//! First-order optimizers with serializable state.

use std::collections::BTreeMap;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum and L2 weight decay.
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn tag(&self) -> u8 {
        match self {
            OptimizerKind::Sgd { .. } => 0,
            OptimizerKind::Adam { .. } => 1,
        }
    }

    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    pub m: BTreeMap<String, Tensor<T>>,
    /// Second moment (Adam only).
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update using `grads`; parameters without a gradient are
    /// left untouched.
    pub fn apply(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.step += 1;
        let lr = T::from_f64(self.lr);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
            match self.kind {
                OptimizerKind::Sgd { momentum, weight_decay } => {
                    let (mu, wd) = (T::from_f64(momentum), T::from_f64(weight_decay));
                    let buf = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    for ((w, &gr), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                        let d = gr + wd * *w;
                        *b = mu * *b + d;
                        *w -= lr * *b;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
                    let c1 = T::one() - T::from_f64(beta1.powi(self.step as i32));
                    let c2 = T::one() - T::from_f64(beta2.powi(self.step as i32));
                    let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (((w, &gr), mm), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mm = b1 * *mm + (T::one() - b1) * gr;
                        *vv = b2 * *vv + (T::one() - b2) * gr * gr;
                        let mhat = *mm / c1;
                        let vhat = *vv / c2;
                        *w -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Step learning-rate schedule: multiply by `gamma` at each milestone epoch.
pub fn step_lr(base: f64, gamma: f64, milestones: &[usize], epoch: usize) -> f64 {
    base * gamma.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
}

/// Milestones rescaled from a reference schedule to `epochs` total epochs.
pub fn scale_milestones(reference: &[usize], reference_epochs: usize, epochs: usize) -> Vec<usize> {
    reference
        .iter()
        .map(|&m| (m * epochs + reference_epochs / 2) / reference_epochs)
        .collect()
}
