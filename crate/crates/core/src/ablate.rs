//! Stage sweep: one pretraining per seed, one meta-training per stage, and a
//! shared evaluation protocol on the novel split.

use std::collections::HashMap;

use crate::config::RunConfig;
use crate::datagen::Split;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::meta::{evaluate_model, meta_train, pretrain, AlignNet, Checkpoint, LogRecord, Phase, RunSetup, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub stage: Stage,
    pub accuracy: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean accuracy of `stage` over seeds.
    pub fn mean(&self, stage: Stage) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.stage == stage).map(|r| r.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-seed rows followed by one `mean` row per stage.
    pub fn to_csv(&self, stages: &[Stage]) -> String {
        let mut s = String::from("seed,stage,accuracy,ci95\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.seed, r.stage, r.accuracy, r.ci95));
        }
        for &st in stages {
            if let Some(m) = self.mean(st) {
                s.push_str(&format!("mean,{st},{m:.6},\n"));
            }
        }
        s
    }
}

/// Progress events of a sweep.
#[derive(Debug, Clone)]
pub enum Event<'a> {
    Epoch { seed: u64, stage: Stage, record: &'a LogRecord },
    Evaluated(&'a AblationRow),
}

/// Model configuration with the head sized to the base split.
pub fn resolve_model(cfg: &RunConfig, ds: &Dataset) -> crate::meta::ModelConfig {
    let mut m = cfg.model.clone();
    if m.head_classes == 0 {
        m.head_classes = ds.split(Split::Base).classes.len();
    }
    m
}

pub fn run(cfg: &RunConfig, ds: &Dataset, mut on_event: impl FnMut(Event<'_>)) -> Result<AblationReport> {
    if cfg.ablate_seeds.is_empty() || cfg.ablate_stages.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one stage".into()));
    }
    let net = AlignNet::new(resolve_model(cfg, ds))?;
    let novel = ds.split(Split::Novel);
    let mut rows = Vec::new();
    for &seed in &cfg.ablate_seeds {
        let base_setup = RunSetup {
            seed,
            ..cfg.setup()
        };
        let pre = pretrain(&net, ds, &base_setup, &cfg.pretrain, |r| {
            on_event(Event::Epoch {
                seed,
                stage: Stage::BASELINE,
                record: r,
            })
        })?
        .best;
        let mut lsc_runs: HashMap<Stage, Checkpoint> = HashMap::new();
        for &stage in &cfg.ablate_stages {
            let first = stage.without_ssm();
            if !lsc_runs.contains_key(&first) {
                let setup = RunSetup {
                    stage: first,
                    ..base_setup.clone()
                };
                let out = meta_train(&net, ds, &setup, &cfg.meta_lsc, &pre, |r| {
                    on_event(Event::Epoch {
                        seed,
                        stage: first,
                        record: r,
                    })
                })?;
                lsc_runs.insert(first, out.best);
            }
            let ckpt = if stage.ssm {
                let setup = RunSetup {
                    stage,
                    ..base_setup.clone()
                };
                meta_train(&net, ds, &setup, &cfg.meta_ssm, &lsc_runs[&first], |r| {
                    on_event(Event::Epoch { seed, stage, record: r })
                })?
                .best
            } else {
                lsc_runs[&first].clone()
            };
            debug_assert_eq!(ckpt.phase == Phase::MetaSsm, stage.ssm);
            let rep = evaluate_model(&net, &ckpt.params, ds, &novel, stage, &cfg.eval)?;
            let row = AblationRow {
                seed,
                stage,
                accuracy: rep.mean,
                ci95: rep.ci95,
            };
            on_event(Event::Evaluated(&row));
            rows.push(row);
        }
    }
    Ok(AblationReport { rows })
}
