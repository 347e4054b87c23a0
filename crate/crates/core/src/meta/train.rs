//! The three training phases: supervised pretraining with a linear head,
//! then episodic meta-training of the LSC and SSM stages.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, Phase, RngState};
use super::episode::{sample_episode, Episode};
use super::eval::{evaluate_model, EvalProtocol};
use super::model::{nll_loss, AlignNet, Stage};
use crate::datagen::Split;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::optim::{step_lr, Optimizer, OptimizerKind};
use crate::nn::{update_running_stats, Ctx, ParamStore};
use crate::tensor::{BatchStats, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the base split
    /// (pretraining only).
    pub batches: usize,
    pub episodes_per_batch: usize,
    /// Images per pretraining batch.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_gamma: f64,
    pub milestones: Vec<usize>,
    /// Parameter-name prefixes kept fixed.
    pub frozen: Vec<String>,
    pub augment: bool,
}

impl PhaseConfig {
    /// Desk-scale defaults.
    pub fn default_for(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self {
                phase,
                epochs: 30,
                batches: 0,
                episodes_per_batch: 1,
                batch_size: 64,
                optimizer: OptimizerKind::Sgd {
                    momentum: 0.9,
                    weight_decay: 5e-4,
                },
                lr: 0.1,
                lr_gamma: 0.1,
                milestones: vec![13, 26],
                frozen: Vec::new(),
                augment: true,
            },
            Phase::MetaLsc => Self {
                phase,
                epochs: 20,
                batches: 20,
                episodes_per_batch: 4,
                batch_size: 0,
                optimizer: OptimizerKind::adam_default(),
                lr: 1e-3,
                lr_gamma: 1.0,
                milestones: Vec::new(),
                frozen: Vec::new(),
                augment: true,
            },
            Phase::MetaSsm => Self {
                phase,
                epochs: 5,
                batches: 20,
                episodes_per_batch: 4,
                batch_size: 0,
                optimizer: OptimizerKind::adam_default(),
                lr: 1e-4,
                lr_gamma: 1.0,
                milestones: Vec::new(),
                frozen: Vec::new(),
                augment: true,
            },
        }
    }
}

/// Settings shared by all phases of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub seed: u64,
    /// Modules used by the meta phases (`meta_lsc` drops SSM).
    pub stage: Stage,
    pub n_way: usize,
    pub k_shot: usize,
    pub u_query: usize,
    pub val: EvalProtocol,
    pub bn_momentum: f64,
}

impl Default for RunSetup {
    fn default() -> Self {
        Self {
            seed: 1,
            stage: Stage::FULL,
            n_way: 5,
            k_shot: 1,
            u_query: 15,
            val: EvalProtocol {
                episodes: 100,
                seed: 12345,
                ..EvalProtocol::default()
            },
            bn_momentum: 0.1,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub val_acc: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} phase={} loss={:.6} val_acc={:.6}",
            self.epoch, self.phase, self.loss, self.val_acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the best validation epoch (earliest on ties).
    pub best: Checkpoint,
    pub log: Vec<LogRecord>,
}

fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + phase.tag() as u64);
    r
}

fn add_scaled(acc: &mut BTreeMap<String, Tensor<f32>>, g: BTreeMap<String, Tensor<f32>>, scale: f32) {
    for (k, v) in g {
        match acc.get_mut(&k) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(v.data()) {
                    *x += scale * y;
                }
            }
            None => {
                acc.insert(k, v.map(|y| scale * y));
            }
        }
    }
}

fn check_lr(cfg: &PhaseConfig) -> Result<()> {
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("{}: learning rate {} must be >= 0", cfg.phase, cfg.lr)));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config(format!("{}: epochs must be positive", cfg.phase)));
    }
    Ok(())
}

/// Supervised pretraining of the backbone and linear head over all base
/// classes; validation uses prototype episodes on pooled backbone features.
pub fn pretrain(
    net: &AlignNet,
    ds: &Dataset,
    setup: &RunSetup,
    cfg: &PhaseConfig,
    mut on_epoch: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    check_lr(cfg)?;
    let base = ds.split(Split::Base);
    let val = ds.split(Split::Val);
    if base.n_images() == 0 {
        return Err(Error::Config("pretraining needs a non-empty base split".into()));
    }
    if net.config.head_classes != base.classes.len() {
        return Err(Error::Config(format!(
            "head has {} outputs but the base split has {} classes",
            net.config.head_classes,
            base.classes.len()
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("pretraining batch size must be >= 2".into()));
    }
    let mut rng = phase_rng(setup.seed, Phase::Pretrain);
    let mut params: ParamStore<f32> = net.init(&mut rng);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let label_of: BTreeMap<usize, usize> = base.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut pool = base.indices();
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.lr = step_lr(cfg.lr, cfg.lr_gamma, &cfg.milestones, epoch);
        pool.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = pool.chunks(cfg.batch_size).filter(|b| b.len() >= 2).collect();
        if cfg.batches > 0 {
            batches.truncate(cfg.batches);
        }
        let mut total = 0.0;
        for idx in &batches {
            let images = if cfg.augment {
                ds.batch::<f32>(idx, Some(&mut rng as &mut dyn RngCore))
            } else {
                ds.batch::<f32>(idx, None)
            };
            let labels: Vec<usize> = idx.iter().map(|&i| label_of[&ds.label(i)]).collect();
            let (grads, stats, loss) = {
                let mut ctx = Ctx::training(&params).with_frozen(&cfg.frozen);
                let x = ctx.input(images);
                let logits = net.pretrain_logits(&mut ctx, x)?;
                let loss = nll_loss(&mut ctx.graph, logits, &labels)?;
                ctx.graph.backward(loss)?;
                let l = ctx.graph.value(loss).data()[0] as f64;
                (ctx.param_grads(), ctx.take_bn_stats(), l)
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "pretrain loss" });
            }
            total += loss;
            opt.apply(&mut params, &grads)?;
            update_running_stats(&mut params, &stats, setup.bn_momentum)?;
        }
        let val_acc = evaluate_model(net, &params, ds, &val, Stage::BASELINE, &setup.val)?.mean;
        let rec = LogRecord {
            epoch: epoch + 1,
            phase: Phase::Pretrain,
            loss: total / batches.len().max(1) as f64,
            val_acc,
        };
        on_epoch(&rec);
        log.push(rec);
        if best.as_ref().is_none_or(|b| val_acc > b.val_score) {
            best = Some(Checkpoint {
                phase: Phase::Pretrain,
                stage: Stage::BASELINE,
                model: net.config.clone(),
                norm: ds.norm,
                params: params.clone(),
                optimizer: opt.clone(),
                rng: RngState::capture(&rng),
                epoch: (epoch + 1) as u32,
                val_score: val_acc,
            });
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
    })
}

/// Loss, gradients and batch statistics of one training episode.
pub fn episode_step(
    net: &AlignNet,
    params: &ParamStore<f32>,
    ds: &Dataset,
    episode: &Episode,
    stage: Stage,
    frozen: &[String],
    augment_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>, Vec<(String, BatchStats<f32>)>)> {
    let idx = episode.image_indices();
    let images = match augment_seed {
        Some(s) => {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            ds.batch::<f32>(&idx, Some(&mut r as &mut dyn RngCore))
        }
        None => ds.batch::<f32>(&idx, None),
    };
    let mut ctx = Ctx::training(params).with_frozen(frozen);
    let x = ctx.input(images);
    let (loss, _) = net.episode_loss(
        &mut ctx,
        x,
        &episode.support_labels(),
        &episode.query_labels(),
        episode.n_way,
        stage,
    )?;
    ctx.graph.backward(loss)?;
    let l = ctx.graph.value(loss).data()[0] as f64;
    if !l.is_finite() {
        return Err(Error::NonFinite { op: "episode loss" });
    }
    Ok((l, ctx.param_grads(), ctx.take_bn_stats()))
}

/// Episodic meta-training from `init`. `meta_lsc` starts from a pretraining
/// checkpoint and trains without SSM; `meta_ssm` starts from a `meta_lsc`
/// checkpoint and trains the full stage.
pub fn meta_train(
    net: &AlignNet,
    ds: &Dataset,
    setup: &RunSetup,
    cfg: &PhaseConfig,
    init: &Checkpoint,
    mut on_epoch: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    check_lr(cfg)?;
    let phase = cfg.phase;
    let Some(required) = phase.requires() else {
        return Err(Error::Config("meta_train runs meta_lsc or meta_ssm, not pretrain".into()));
    };
    if init.phase != required {
        return Err(Error::Config(format!(
            "{phase} must start from a {required} checkpoint, got {}",
            init.phase
        )));
    }
    if init.model != net.config {
        return Err(Error::Config("initial checkpoint was trained with a different model configuration".into()));
    }
    let stage = match phase {
        Phase::MetaSsm if !setup.stage.ssm => {
            return Err(Error::Config(format!("meta_ssm needs a stage with ssm, got {}", setup.stage)))
        }
        Phase::MetaSsm => setup.stage,
        _ => setup.stage.without_ssm(),
    };
    if cfg.episodes_per_batch == 0 || cfg.batches == 0 {
        return Err(Error::Config(format!("{phase}: batches and episodes per batch must be positive")));
    }
    let base = ds.split(Split::Base);
    let val = ds.split(Split::Val);
    let mut params = init.params.clone();
    params.remove_prefix(AlignNet::HEAD_PREFIX);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = phase_rng(setup.seed, phase);
    let scale = 1.0 / cfg.episodes_per_batch as f32;
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        opt.lr = step_lr(cfg.lr, cfg.lr_gamma, &cfg.milestones, epoch);
        let mut total = 0.0;
        for _ in 0..cfg.batches {
            let mut jobs = Vec::with_capacity(cfg.episodes_per_batch);
            for _ in 0..cfg.episodes_per_batch {
                let e = sample_episode(&base, setup.n_way, setup.k_shot, setup.u_query, &mut rng)?;
                let s = cfg.augment.then(|| rng.gen::<u64>());
                jobs.push((e, s));
            }
            let results = jobs
                .par_iter()
                .map(|(e, s)| episode_step(net, &params, ds, e, stage, &cfg.frozen, *s))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (l, g, stats) in results {
                batch_loss += l;
                add_scaled(&mut grads, g, scale);
                update_running_stats(&mut params, &stats, setup.bn_momentum)?;
            }
            total += batch_loss / cfg.episodes_per_batch as f64;
            opt.apply(&mut params, &grads)?;
        }
        let val_acc = evaluate_model(net, &params, ds, &val, stage, &setup.val)?.mean;
        let rec = LogRecord {
            epoch: epoch + 1,
            phase,
            loss: total / cfg.batches as f64,
            val_acc,
        };
        on_epoch(&rec);
        log.push(rec);
        if best.as_ref().is_none_or(|b| val_acc > b.val_score) {
            best = Some(Checkpoint {
                phase,
                stage,
                model: net.config.clone(),
                norm: init.norm,
                params: params.clone(),
                optimizer: opt.clone(),
                rng: RngState::capture(&rng),
                epoch: (epoch + 1) as u32,
                val_score: val_acc,
            });
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
    })
}
