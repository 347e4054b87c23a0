//! The full network: backbone, alignment modules, and the prototype
//! classifier over aligned support features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::foe::Foe;
use crate::kv;
use crate::lsc::{Lsc, LscOutput, TransformSource};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::ssm::{Ssm, SsmOutput};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceOn {
    /// Squared distance between GAP-pooled vectors.
    Pooled,
    /// Squared distance between flattened `C*H*W` maps.
    Flattened,
}

impl FromStr for DistanceOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "flattened" => Ok(Self::Flattened),
            _ => Err(Error::Parse(format!("distance_on `{s}` (expected pooled|flattened)"))),
        }
    }
}

impl fmt::Display for DistanceOn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pooled => "pooled",
            Self::Flattened => "flattened",
        })
    }
}

impl FromStr for TransformSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "projected" => Ok(Self::Projected),
            _ => Err(Error::Parse(format!("transform_source `{s}` (expected full|projected)"))),
        }
    }
}

impl fmt::Display for TransformSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Projected => "projected",
        })
    }
}

/// Which alignment modules run, in order FOE -> LSC -> SSM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stage {
    pub foe: bool,
    pub lsc: bool,
    pub ssm: bool,
}

impl Stage {
    pub const BASELINE: Stage = Stage {
        foe: false,
        lsc: false,
        ssm: false,
    };
    pub const FULL: Stage = Stage {
        foe: true,
        lsc: true,
        ssm: true,
    };

    /// The ablation sweep in table order.
    pub const SWEEP: [Stage; 6] = [
        Stage::BASELINE,
        Stage {
            foe: true,
            lsc: false,
            ssm: false,
        },
        Stage {
            foe: false,
            lsc: true,
            ssm: false,
        },
        Stage {
            foe: false,
            lsc: true,
            ssm: true,
        },
        Stage {
            foe: true,
            lsc: true,
            ssm: false,
        },
        Stage::FULL,
    ];

    pub fn without_ssm(self) -> Stage {
        Stage { ssm: false, ..self }
    }

    pub fn needs_pairs(self) -> bool {
        self.lsc || self.ssm
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (foe, lsc, ssm) = match s {
            "baseline" => (false, false, false),
            "foe" => (true, false, false),
            "foe+lsc" => (true, true, false),
            "foe+lsc+ssm" | "full" => (true, true, true),
            "lsc" => (false, true, false),
            "lsc+ssm" => (false, true, true),
            _ => {
                return Err(Error::Parse(format!(
                    "stage `{s}` (expected baseline|foe|foe+lsc|foe+lsc+ssm|lsc|lsc+ssm)"
                )))
            }
        };
        Ok(Stage { foe, lsc, ssm })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.foe {
            parts.push("foe");
        }
        if self.lsc {
            parts.push("lsc");
        }
        if self.ssm {
            parts.push("ssm");
        }
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Projected channel count `C'`; 0 selects `C / 2`.
    pub proj_channels: usize,
    pub foe_deform: bool,
    pub foe_mask: bool,
    pub transform_source: TransformSource,
    pub offset_scale: f64,
    pub distance_on: DistanceOn,
    /// Width of the pretraining classification head.
    pub head_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            proj_channels: 0,
            foe_deform: true,
            foe_mask: true,
            transform_source: TransformSource::Full,
            offset_scale: 1.0,
            distance_on: DistanceOn::Pooled,
            head_classes: 40,
        }
    }
}

impl ModelConfig {
    /// `key=value` lines for every field.
    pub fn entries(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        [
            ("backbone.in_channels", b.in_channels.to_string()),
            ("backbone.channels", kv::join(&b.block_channels)),
            ("data.input_size", b.input_size.to_string()),
            ("model.proj_channels", self.proj_channels.to_string()),
            ("model.foe_deform", self.foe_deform.to_string()),
            ("model.foe_mask", self.foe_mask.to_string()),
            ("model.transform_source", self.transform_source.to_string()),
            ("model.offset_scale", self.offset_scale.to_string()),
            ("model.distance_on", self.distance_on.to_string()),
            ("model.head_classes", self.head_classes.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field; `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, k: &str, v: &str) -> Result<bool> {
        match k {
            "backbone.in_channels" => self.backbone.in_channels = kv::parse_value(k, v)?,
            "backbone.channels" => {
                let c: Vec<usize> = kv::parse_list(k, v)?;
                self.backbone.block_channels = c
                    .try_into()
                    .map_err(|_| Error::Config(format!("{k} needs exactly 4 values")))?;
            }
            "data.input_size" => self.backbone.input_size = kv::parse_value(k, v)?,
            "model.proj_channels" => self.proj_channels = kv::parse_value(k, v)?,
            "model.foe_deform" => self.foe_deform = kv::parse_bool(k, v)?,
            "model.foe_mask" => self.foe_mask = kv::parse_bool(k, v)?,
            "model.transform_source" => self.transform_source = v.parse()?,
            "model.offset_scale" => self.offset_scale = kv::parse_value(k, v)?,
            "model.distance_on" => self.distance_on = v.parse()?,
            "model.head_classes" => self.head_classes = kv::parse_value(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn resolved_proj_channels(&self) -> usize {
        if self.proj_channels == 0 {
            (self.backbone.feature_channels() / 2).max(1)
        } else {
            self.proj_channels
        }
    }
}

/// Intermediate values of one alignment pass.
#[derive(Debug, Clone, Copy)]
pub struct AlignTrace {
    pub aligned: Var,
    pub lsc: Option<LscOutput>,
    pub ssm: Option<SsmOutput>,
}

/// One support/query pair run through the enabled stages; maps are `[C, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct PairAlignment {
    /// Support after FOE (or the raw features).
    pub support: Var,
    pub query: Var,
    pub aligned: Var,
    /// `[2, 1, H, W]` soft masks, support first, when FOE masking is on.
    pub masks: Option<Var>,
    pub trace: AlignTrace,
}

/// Result of an episode forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeForward {
    /// `[n_query, n_way]` negative squared distances.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct AlignNet {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub foe: Foe,
    pub lsc: Lsc,
    pub ssm: Ssm,
    pub head: Linear,
}

impl AlignNet {
    pub const HEAD_PREFIX: &'static str = "head.";

    pub fn new(config: ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone())?;
        let c = config.backbone.feature_channels();
        if !(config.offset_scale.is_finite() && config.offset_scale >= 0.0) {
            return Err(Error::Config(format!("offset_scale {} must be finite and >= 0", config.offset_scale)));
        }
        Ok(Self {
            foe: Foe::new(c, config.foe_deform, config.foe_mask),
            lsc: Lsc::new(c, config.resolved_proj_channels(), config.transform_source),
            ssm: Ssm::new(c, config.offset_scale),
            head: Linear::new("head", c, config.head_classes.max(1)),
            backbone,
            config,
        })
    }

    /// Fresh parameters for every module (including the pretraining head).
    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.backbone.init(&mut store, rng);
        self.foe.init(&mut store, rng);
        self.lsc.init(&mut store, rng);
        self.ssm.init(&mut store, rng);
        self.head.init(&mut store, rng);
        store
    }

    pub fn features<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        self.backbone.forward(ctx, images)
    }

    /// Pretraining logits: linear head on pooled backbone features.
    pub fn pretrain_logits<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let f = self.features(ctx, images)?;
        let v = ctx.graph.gap(f)?;
        self.head.forward(ctx, v)
    }

    /// LSC and SSM over already paired (FOE-processed) features.
    ///
    /// `proj` carries per-pair projected features `(support, query)` when the
    /// caller has projected images once and gathered them per pair.
    pub fn align_pairs<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        fs: Var,
        fq: Var,
        proj: Option<(Var, Var)>,
        stage: Stage,
    ) -> Result<AlignTrace> {
        let mut aligned = fs;
        let mut lsc = None;
        if stage.lsc {
            let out = match proj {
                Some((ps, pq)) => {
                    let raw = crate::lsc::correlation(&mut ctx.graph, pq, ps)?;
                    let normalized = crate::lsc::normalize(&mut ctx.graph, raw)?;
                    let src = match self.lsc.source {
                        TransformSource::Full => fs,
                        TransformSource::Projected => ps,
                    };
                    let aligned = crate::lsc::transform(&mut ctx.graph, normalized, src)?;
                    LscOutput {
                        raw,
                        normalized,
                        aligned,
                    }
                }
                None => self.lsc.forward(ctx, fs, fq)?,
            };
            aligned = out.aligned;
            lsc = Some(out);
        }
        let mut ssm = None;
        if stage.ssm {
            let q = if stage.lsc && self.lsc.source == TransformSource::Projected {
                proj.map(|p| p.1).ok_or_else(|| {
                    Error::Config("projected transform source requires projected query features".into())
                })?
            } else {
                fq
            };
            let out = self.ssm.forward(ctx, aligned, q)?;
            aligned = out.resampled;
            ssm = Some(out);
        }
        Ok(AlignTrace { aligned, lsc, ssm })
    }

    /// Aligns a single `[C, H, W]` support feature to a `[C, H, W]` query
    /// feature; returns `(aligned support, processed query)`.
    pub fn align_pair<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        support: Var,
        query: Var,
        stage: Stage,
    ) -> Result<PairAlignment> {
        let (ss, sq) = (ctx.graph.shape(support).to_vec(), ctx.graph.shape(query).to_vec());
        if ss.len() != 3 || ss != sq {
            return Err(Error::shape("align_pair", format!("matching [C, H, W], support {ss:?}"), format!("query {sq:?}")));
        }
        let s4 = ctx.graph.reshape(support, &[vec![1], ss.clone()].concat())?;
        let q4 = ctx.graph.reshape(query, &[vec![1], sq.clone()].concat())?;
        let (fs, fq, masks) = if stage.foe {
            let both = ctx.graph.concat(s4, q4, 0)?;
            let (refined, masks) = self.foe.forward(ctx, both)?;
            (ctx.graph.index_select(refined, &[0])?, ctx.graph.index_select(refined, &[1])?, masks)
        } else {
            (s4, q4, None)
        };
        let proj = if stage.lsc {
            let both = ctx.graph.concat(fs, fq, 0)?;
            let p = self.lsc.projector.forward(ctx, both)?;
            Some((ctx.graph.index_select(p, &[0])?, ctx.graph.index_select(p, &[1])?))
        } else {
            None
        };
        let trace = self.align_pairs(ctx, fs, fq, proj, stage)?;
        Ok(PairAlignment {
            support: ctx.graph.reshape(fs, &ss)?,
            query: ctx.graph.reshape(fq, &sq)?,
            aligned: ctx.graph.reshape(trace.aligned, &ss)?,
            masks,
            trace,
        })
    }

    fn embed<T: Real>(&self, g: &mut Graph<T>, f: Var) -> Result<Var> {
        match self.config.distance_on {
            DistanceOn::Pooled => g.gap(f),
            DistanceOn::Flattened => {
                let s = g.shape(f).to_vec();
                let n = s[0];
                let d = s[1..].iter().product::<usize>();
                g.reshape(f, &[n, d])
            }
        }
    }

    /// Episode logits for `images = [supports..., queries...]` where supports
    /// are grouped by episode-local label.
    pub fn episode_forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        images: Var,
        support_labels: &[usize],
        n_way: usize,
        stage: Stage,
    ) -> Result<EpisodeForward> {
        let f = self.features(ctx, images)?;
        let f = if stage.foe { self.foe.forward(ctx, f)?.0 } else { f };
        self.classify_features(ctx, f, support_labels, n_way, stage)
    }

    /// Episode logits from `[supports..., queries...]` features that already
    /// passed the backbone (and FOE when the stage enables it).
    pub fn classify_features<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        f: Var,
        support_labels: &[usize],
        n_way: usize,
        stage: Stage,
    ) -> Result<EpisodeForward> {
        let n_s = support_labels.len();
        let total = ctx.graph.shape(f)[0];
        if n_s == 0 || total <= n_s || support_labels.iter().any(|&l| l >= n_way) {
            return Err(Error::invalid(
                "episode_forward",
                format!("{n_s} supports, {total} images, {n_way}-way"),
            ));
        }
        let n_q = total - n_s;
        let mut counts = vec![0usize; n_way];
        for &l in support_labels {
            counts[l] += 1;
        }
        if counts.contains(&0) {
            return Err(Error::invalid("episode_forward", "every class needs at least one support"));
        }

        let s_idx: Vec<usize> = (0..n_s).collect();
        let q_idx: Vec<usize> = (n_s..total).collect();
        let fq_all = ctx.graph.index_select(f, &q_idx)?;
        let q_emb = self.embed(&mut ctx.graph, fq_all)?;

        // prototypes: [n_q * n_way, D], row q * n_way + c
        let protos = if stage.needs_pairs() {
            let pair_s: Vec<usize> = (0..n_q).flat_map(|_| 0..n_s).collect();
            let pair_q: Vec<usize> = (0..n_q).flat_map(|q| std::iter::repeat_n(n_s + q, n_s)).collect();
            let fs = ctx.graph.index_select(f, &pair_s)?;
            let fq = ctx.graph.index_select(f, &pair_q)?;
            let proj = if stage.lsc {
                let p = self.lsc.projector.forward(ctx, f)?;
                Some((ctx.graph.index_select(p, &pair_s)?, ctx.graph.index_select(p, &pair_q)?))
            } else {
                None
            };
            let trace = self.align_pairs(ctx, fs, fq, proj, stage)?;
            let emb = self.embed(&mut ctx.graph, trace.aligned)?;
            let p = n_q * n_s;
            let mut avg = vec![T::zero(); n_q * n_way * p];
            for q in 0..n_q {
                for (s, &l) in support_labels.iter().enumerate() {
                    avg[(q * n_way + l) * p + q * n_s + s] = T::one() / T::from_f64(counts[l] as f64);
                }
            }
            let avg = ctx.graph.constant(Tensor::new(&[n_q * n_way, p], avg)?);
            ctx.graph.matmul(avg, emb)?
        } else {
            let fs = ctx.graph.index_select(f, &s_idx)?;
            let emb = self.embed(&mut ctx.graph, fs)?;
            let mut avg = vec![T::zero(); n_way * n_s];
            for (s, &l) in support_labels.iter().enumerate() {
                avg[l * n_s + s] = T::one() / T::from_f64(counts[l] as f64);
            }
            let avg = ctx.graph.constant(Tensor::new(&[n_way, n_s], avg)?);
            let per_class = ctx.graph.matmul(avg, emb)?;
            let rep: Vec<usize> = (0..n_q).flat_map(|_| 0..n_way).collect();
            ctx.graph.index_select(per_class, &rep)?
        };
        let q_rep: Vec<usize> = (0..n_q).flat_map(|q| std::iter::repeat_n(q, n_way)).collect();
        let qr = ctx.graph.index_select(q_emb, &q_rep)?;
        let diff = ctx.graph.sub(protos, qr)?;
        let sq = ctx.graph.mul(diff, diff)?;
        let d2 = ctx.graph.sum_last(sq)?;
        let d2 = ctx.graph.reshape(d2, &[n_q, n_way])?;
        let logits = ctx.graph.affine(d2, -T::one(), T::zero());
        Ok(EpisodeForward { logits })
    }

    /// Mean negative log-likelihood of the query labels.
    pub fn episode_loss<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        images: Var,
        support_labels: &[usize],
        query_labels: &[usize],
        n_way: usize,
        stage: Stage,
    ) -> Result<(Var, EpisodeForward)> {
        let fwd = self.episode_forward(ctx, images, support_labels, n_way, stage)?;
        let loss = nll_loss(&mut ctx.graph, fwd.logits, query_labels)?;
        Ok((loss, fwd))
    }
}

/// `-mean(log_softmax(logits)[r, labels[r]])`.
pub fn nll_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.pick(lp, labels)?;
    let m = g.mean(picked);
    Ok(g.affine(m, -T::one(), T::zero()))
}

/// Class probabilities from squared distances: softmax of `-d2`.
pub fn prototype_probabilities(d2: &[f64]) -> Vec<f64> {
    let mx = d2.iter().fold(f64::NEG_INFINITY, |a, &d| a.max(-d));
    let e: Vec<f64> = d2.iter().map(|&d| (-d - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
