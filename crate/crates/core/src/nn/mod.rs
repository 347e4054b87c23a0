//! Named parameters, the per-forward binding context, and the layers the
//! network modules are assembled from.

mod layers;
pub mod optim;

use std::collections::{BTreeMap, HashMap};

pub use layers::{BatchNorm, Conv2d, ConvInit, Linear};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// False for buffers such as batch-norm running statistics.
    pub trainable: bool,
}

/// Ordered map of every parameter and buffer of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies every entry of `other` whose name starts with one of `prefixes`.
    pub fn copy_from(&mut self, other: &ParamStore<T>, prefixes: &[&str]) {
        for (k, p) in &other.entries {
            if prefixes.iter().any(|pre| k.starts_with(pre)) {
                self.entries.insert(k.clone(), p.clone());
            }
        }
    }
}

/// Forward-pass context: owns the tape and lazily binds store entries to
/// tape leaves.
pub struct Ctx<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    train: bool,
    grad_enabled: bool,
    frozen: Vec<String>,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// `train` selects batch statistics in batch norm; `grad_enabled`
    /// decides whether parameters become differentiable leaves.
    pub fn new(store: &'a ParamStore<T>, train: bool, grad_enabled: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            train,
            grad_enabled,
            frozen: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn training(store: &'a ParamStore<T>) -> Self {
        Self::new(store, true, true)
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false, false)
    }

    /// Parameters whose name starts with any prefix are bound as constants.
    pub fn with_frozen(mut self, prefixes: &[String]) -> Self {
        self.frozen = prefixes.to_vec();
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self
            .store
            .entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let trainable =
            self.grad_enabled && entry.trainable && !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.graph.leaf(entry.value.clone(), trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub(crate) fn record_bn(&mut self, name: &str, stats: BatchStats<T>) {
        self.bn_stats.push((name.to_string(), stats));
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients of every bound differentiable parameter after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.graph.requires_grad(v))
            .map(|(k, &v)| (k.clone(), self.graph.grad(v)))
            .collect()
    }
}

/// Folds observed batch statistics into the running estimates.
pub fn update_running_stats<T: Real>(
    store: &mut ParamStore<T>,
    stats: &[(String, BatchStats<T>)],
    momentum: f64,
) -> Result<()> {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    for (name, s) in stats {
        let rm = store.get_mut(&format!("{name}.running_mean"))?;
        for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = keep * *r + m * b;
        }
        let rv = store.get_mut(&format!("{name}.running_var"))?;
        for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = keep * *r + m * b;
        }
    }
    Ok(())
}
