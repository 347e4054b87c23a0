//! Run configuration: every key has a default, files and flags override,
//! unknown keys are rejected, and the resolved form re-parses to itself.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::kv;
use crate::meta::{EvalProtocol, ModelConfig, Phase, PhaseConfig, RunSetup, Stage};
use crate::nn::optim::OptimizerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub model: ModelConfig,
    pub stage: Stage,
    pub n_way: usize,
    pub k_shot: usize,
    pub u_query: usize,
    pub val_episodes: usize,
    pub val_seed: u64,
    pub bn_momentum: f64,
    pub pretrain: PhaseConfig,
    pub meta_lsc: PhaseConfig,
    pub meta_ssm: PhaseConfig,
    pub eval: EvalProtocol,
    pub ablate_seeds: Vec<u64>,
    pub ablate_stages: Vec<Stage>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let setup = RunSetup::default();
        Self {
            seed: setup.seed,
            data_dir: PathBuf::from("corpus"),
            model: ModelConfig::default(),
            stage: setup.stage,
            n_way: setup.n_way,
            k_shot: setup.k_shot,
            u_query: setup.u_query,
            val_episodes: setup.val.episodes,
            val_seed: setup.val.seed,
            bn_momentum: setup.bn_momentum,
            pretrain: PhaseConfig::default_for(Phase::Pretrain),
            meta_lsc: PhaseConfig::default_for(Phase::MetaLsc),
            meta_ssm: PhaseConfig::default_for(Phase::MetaSsm),
            eval: EvalProtocol {
                seed: 2024,
                ..EvalProtocol::default()
            },
            ablate_seeds: vec![1, 2, 3],
            ablate_stages: vec![
                Stage::BASELINE,
                "lsc".parse().expect("stage"),
                "foe+lsc".parse().expect("stage"),
                Stage::FULL,
            ],
        }
    }
}

fn phase_entries(prefix: &str, p: &PhaseConfig) -> Vec<(String, String)> {
    let mut v = vec![
        ("epochs", p.epochs.to_string()),
        ("batches", p.batches.to_string()),
        ("episodes_per_batch", p.episodes_per_batch.to_string()),
        ("batch_size", p.batch_size.to_string()),
        ("lr", p.lr.to_string()),
        ("lr_gamma", p.lr_gamma.to_string()),
        ("milestones", kv::join(&p.milestones)),
        ("frozen", p.frozen.join(",")),
        ("augment", p.augment.to_string()),
    ];
    match p.optimizer {
        OptimizerKind::Sgd { momentum, weight_decay } => {
            v.push(("optimizer", "sgd".into()));
            v.push(("momentum", momentum.to_string()));
            v.push(("weight_decay", weight_decay.to_string()));
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            v.push(("optimizer", "adam".into()));
            v.push(("beta1", beta1.to_string()));
            v.push(("beta2", beta2.to_string()));
            v.push(("eps", eps.to_string()));
        }
    }
    v.into_iter().map(|(k, val)| (format!("{prefix}.{k}"), val)).collect()
}

fn set_phase(p: &mut PhaseConfig, k: &str, full: &str, v: &str) -> Result<()> {
    let bad_opt = || Error::Config(format!("{full} does not apply to the configured optimizer"));
    match k {
        "epochs" => p.epochs = kv::parse_value(full, v)?,
        "batches" => p.batches = kv::parse_value(full, v)?,
        "episodes_per_batch" => p.episodes_per_batch = kv::parse_value(full, v)?,
        "batch_size" => p.batch_size = kv::parse_value(full, v)?,
        "lr" => p.lr = kv::parse_value(full, v)?,
        "lr_gamma" => p.lr_gamma = kv::parse_value(full, v)?,
        "milestones" => p.milestones = kv::parse_list(full, v)?,
        "frozen" => p.frozen = kv::parse_list(full, v)?,
        "augment" => p.augment = kv::parse_bool(full, v)?,
        "optimizer" => {
            p.optimizer = match (v, p.optimizer) {
                ("sgd", o @ OptimizerKind::Sgd { .. }) => o,
                ("sgd", _) => OptimizerKind::Sgd {
                    momentum: 0.9,
                    weight_decay: 0.0,
                },
                ("adam", o @ OptimizerKind::Adam { .. }) => o,
                ("adam", _) => OptimizerKind::adam_default(),
                _ => return Err(Error::Config(format!("{full}=`{v}` (expected sgd|adam)"))),
            }
        }
        "momentum" | "weight_decay" => match &mut p.optimizer {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                let x = kv::parse_value(full, v)?;
                if k == "momentum" {
                    *momentum = x
                } else {
                    *weight_decay = x
                }
            }
            _ => return Err(bad_opt()),
        },
        "beta1" | "beta2" | "eps" => match &mut p.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let x = kv::parse_value(full, v)?;
                match k {
                    "beta1" => *beta1 = x,
                    "beta2" => *beta2 = x,
                    _ => *eps = x,
                }
            }
            _ => return Err(bad_opt()),
        },
        _ => return Err(Error::Config(format!("unknown key `{full}`"))),
    }
    Ok(())
}

impl RunConfig {
    /// Every key with its current value, in a stable order. Optimizer kind
    /// precedes its hyperparameters so the text re-parses to the same value.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("data.dir".into(), self.data_dir.display().to_string()),
        ];
        v.extend(self.model.entries());
        v.extend([
            ("model.stage".into(), self.stage.to_string()),
            ("episode.way".into(), self.n_way.to_string()),
            ("episode.shot".into(), self.k_shot.to_string()),
            ("episode.query".into(), self.u_query.to_string()),
            ("val.episodes".into(), self.val_episodes.to_string()),
            ("val.seed".into(), self.val_seed.to_string()),
            ("bn.momentum".into(), self.bn_momentum.to_string()),
        ]);
        for (name, p) in [("pretrain", &self.pretrain), ("meta_lsc", &self.meta_lsc), ("meta_ssm", &self.meta_ssm)] {
            let mut e = phase_entries(name, p);
            let at = e.iter().position(|(k, _)| k.ends_with(".optimizer")).expect("optimizer key");
            let opt = e.remove(at);
            e.insert(0, opt);
            v.extend(e);
        }
        v.extend([
            ("eval.way".into(), self.eval.n_way.to_string()),
            ("eval.shot".into(), self.eval.k_shot.to_string()),
            ("eval.query".into(), self.eval.u_query.to_string()),
            ("eval.episodes".into(), self.eval.episodes.to_string()),
            ("eval.seed".into(), self.eval.seed.to_string()),
            ("ablate.seeds".into(), kv::join(&self.ablate_seeds)),
            ("ablate.stages".into(), kv::join(&self.ablate_stages)),
        ]);
        v
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        if self.model.set(k, v)? {
            return Ok(());
        }
        if let Some((prefix, rest)) = k.split_once('.') {
            let phase = match prefix {
                "pretrain" => Some(&mut self.pretrain),
                "meta_lsc" => Some(&mut self.meta_lsc),
                "meta_ssm" => Some(&mut self.meta_ssm),
                _ => None,
            };
            if let Some(p) = phase {
                return set_phase(p, rest, k, v);
            }
        }
        match k {
            "seed" => self.seed = kv::parse_value(k, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "model.stage" => self.stage = v.parse()?,
            "episode.way" => self.n_way = kv::parse_value(k, v)?,
            "episode.shot" => self.k_shot = kv::parse_value(k, v)?,
            "episode.query" => self.u_query = kv::parse_value(k, v)?,
            "val.episodes" => self.val_episodes = kv::parse_value(k, v)?,
            "val.seed" => self.val_seed = kv::parse_value(k, v)?,
            "bn.momentum" => self.bn_momentum = kv::parse_value(k, v)?,
            "eval.way" => self.eval.n_way = kv::parse_value(k, v)?,
            "eval.shot" => self.eval.k_shot = kv::parse_value(k, v)?,
            "eval.query" => self.eval.u_query = kv::parse_value(k, v)?,
            "eval.episodes" => self.eval.episodes = kv::parse_value(k, v)?,
            "eval.seed" => self.eval.seed = kv::parse_value(k, v)?,
            "ablate.seeds" => self.ablate_seeds = kv::parse_list(k, v)?,
            "ablate.stages" => self.ablate_stages = kv::parse_list(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Defaults, then `text` in file order.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got `{line}`")))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::MetaLsc => &self.meta_lsc,
            Phase::MetaSsm => &self.meta_ssm,
        }
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            seed: self.seed,
            stage: self.stage,
            n_way: self.n_way,
            k_shot: self.k_shot,
            u_query: self.u_query,
            val: EvalProtocol {
                n_way: self.n_way,
                k_shot: self.k_shot,
                u_query: self.u_query,
                episodes: self.val_episodes,
                seed: self.val_seed,
            },
            bn_momentum: self.bn_momentum,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&[
            "meta_lsc.lr=0.0005".into(),
            "pretrain.milestones=3,6".into(),
            "meta_ssm.frozen=backbone.,foe.".into(),
            "model.distance_on=flattened".into(),
        ])
        .unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_text("nope=1").is_err());
        assert!(RunConfig::from_text("pretrain.nope=1").is_err());
        assert!(RunConfig::from_text("meta_lsc.momentum=0.5").is_err());
    }

    #[test]
    fn optimizer_switch_keeps_key_order_valid() {
        let c = RunConfig::from_text("meta_lsc.optimizer=sgd\nmeta_lsc.momentum=0.5\n").unwrap();
        assert_eq!(
            c.meta_lsc.optimizer,
            OptimizerKind::Sgd {
                momentum: 0.5,
                weight_decay: 0.0
            }
        );
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
