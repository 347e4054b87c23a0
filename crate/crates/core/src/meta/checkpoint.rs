//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `"ALNC"`, u32 version, u64 body length, body.
//! The body holds the phase tag, stage, model configuration text, the named
//! parameter table (tensor records), optimizer state, RNG state, epoch and
//! validation score.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ModelConfig, Stage};
use crate::dataset::Norm;
use crate::error::{Error, Result};
use crate::kv;
use crate::nn::optim::{Optimizer, OptimizerKind};
use crate::nn::ParamStore;
use crate::tensor::io::{decode_tensor, encode_tensor, put_string, ByteReader};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ALNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain,
    MetaLsc,
    MetaSsm,
}

impl Phase {
    pub fn tag(self) -> u8 {
        match self {
            Phase::Pretrain => 0,
            Phase::MetaLsc => 1,
            Phase::MetaSsm => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Phase::Pretrain),
            1 => Ok(Phase::MetaLsc),
            2 => Ok(Phase::MetaSsm),
            _ => Err(Error::Integrity(format!("unknown phase tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::MetaLsc => "meta_lsc",
            Phase::MetaSsm => "meta_ssm",
        }
    }

    /// The phase whose checkpoint this phase must start from.
    pub fn requires(self) -> Option<Phase> {
        match self {
            Phase::Pretrain => None,
            Phase::MetaLsc => Some(Phase::Pretrain),
            Phase::MetaSsm => Some(Phase::MetaLsc),
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "meta_lsc" => Ok(Phase::MetaLsc),
            "meta_ssm" => Ok(Phase::MetaSsm),
            _ => Err(Error::Parse(format!("phase `{s}` (expected pretrain|meta_lsc|meta_ssm)"))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Full ChaCha position: key, stream and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub phase: Phase,
    pub stage: Stage,
    pub model: ModelConfig,
    pub norm: Norm,
    pub params: ParamStore<f32>,
    pub optimizer: Optimizer<f32>,
    pub rng: RngState,
    pub epoch: u32,
    pub val_score: f64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_table(out: &mut Vec<u8>, t: &std::collections::BTreeMap<String, Tensor<f32>>) {
    put_u32(out, t.len() as u32);
    for (k, v) in t {
        put_string(out, k);
        encode_tensor(v, out);
    }
}

fn read_table(r: &mut ByteReader<'_>) -> Result<std::collections::BTreeMap<String, Tensor<f32>>> {
    let n = r.u32()?;
    let mut t = std::collections::BTreeMap::new();
    for _ in 0..n {
        let k = r.string()?;
        t.insert(k, decode_tensor(r)?);
    }
    Ok(t)
}

fn model_text(model: &ModelConfig, norm: &Norm) -> String {
    let mut s = String::new();
    for (k, v) in model.entries() {
        s.push_str(&format!("{k}={v}\n"));
    }
    s.push_str(&format!("data.norm_mean={}\n", kv::join(&norm.mean)));
    s.push_str(&format!("data.norm_std={}\n", kv::join(&norm.std)));
    s
}

fn parse_model_text(text: &str) -> Result<(ModelConfig, Norm)> {
    let mut model = ModelConfig::default();
    let mut norm = Norm::default();
    let triple = |k: &str, v: &str| -> Result<[f64; 3]> {
        let xs: Vec<f64> = kv::parse_list(k, v)?;
        xs.try_into()
            .map_err(|_| Error::Integrity(format!("{k} needs 3 values")))
    };
    for (k, v) in kv::parse(text)? {
        match k.as_str() {
            "data.norm_mean" => norm.mean = triple(&k, &v)?,
            "data.norm_std" => norm.std = triple(&k, &v)?,
            _ => {
                if !model.set(&k, &v)? {
                    return Err(Error::Integrity(format!("unknown model key `{k}`")));
                }
            }
        }
    }
    Ok((model, norm))
}

impl Checkpoint {
    /// Freshly initialized pretrain-phase checkpoint (epoch 0), parameters
    /// drawn from `seed`.
    pub fn untrained(model: ModelConfig, norm: Norm, seed: u64) -> Result<Self> {
        let net = super::AlignNet::new(model.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.init(&mut rng);
        Ok(Self {
            phase: Phase::Pretrain,
            stage: Stage::BASELINE,
            model,
            norm,
            params,
            optimizer: Optimizer::new(OptimizerKind::adam_default(), 0.0),
            rng: RngState::capture(&rng),
            epoch: 0,
            val_score: 0.0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.push(self.phase.tag());
        put_string(&mut body, &self.stage.to_string());
        put_string(&mut body, &model_text(&self.model, &self.norm));
        put_u32(&mut body, self.params.len() as u32);
        for (name, p) in self.params.iter() {
            put_string(&mut body, name);
            body.push(p.trainable as u8);
            encode_tensor(&p.value, &mut body);
        }
        let o = &self.optimizer;
        body.push(o.kind.tag());
        let (a, b, c) = match o.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => (momentum, weight_decay, 0.0),
            OptimizerKind::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
        };
        for v in [a, b, c, o.lr] {
            put_f64(&mut body, v);
        }
        put_u64(&mut body, o.step);
        put_table(&mut body, &o.m);
        put_table(&mut body, &o.v);
        body.extend_from_slice(&self.rng.seed);
        put_u64(&mut body, self.rng.stream);
        body.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut body, self.epoch);
        put_f64(&mut body, self.val_score);

        let mut out = Vec::with_capacity(body.len() + 16);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, body.len() as u64);
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4).map_err(|_| Error::Integrity("file shorter than the header".into()))?;
        if magic != MAGIC {
            return Err(Error::Integrity(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.u64()?;
        if len != r.remaining() as u64 {
            return Err(Error::Integrity(format!(
                "declared body length {len}, found {}",
                r.remaining()
            )));
        }
        let phase = Phase::from_tag(r.u8()?)?;
        let stage: Stage = r.string()?.parse()?;
        let (model, norm) = parse_model_text(&r.string()?)?;
        let n = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let trainable = match r.u8()? {
                0 => false,
                1 => true,
                t => return Err(Error::Integrity(format!("bad trainable flag {t}"))),
            };
            params.insert(name, decode_tensor(&mut r)?, trainable);
        }
        let tag = r.u8()?;
        let (a, b, c, lr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let kind = match tag {
            0 => OptimizerKind::Sgd {
                momentum: a,
                weight_decay: b,
            },
            1 => OptimizerKind::Adam {
                beta1: a,
                beta2: b,
                eps: c,
            },
            t => return Err(Error::Integrity(format!("unknown optimizer tag {t}"))),
        };
        let mut optimizer = Optimizer::new(kind, lr);
        optimizer.step = r.u64()?;
        optimizer.m = read_table(&mut r)?;
        optimizer.v = read_table(&mut r)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        let epoch = r.u32()?;
        let val_score = r.f64()?;
        if r.remaining() != 0 {
            return Err(Error::Integrity(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            phase,
            stage,
            model,
            norm,
            params,
            optimizer,
            rng,
            epoch,
            val_score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
