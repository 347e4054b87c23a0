//! Episode evaluation with per-episode RNG streams and normal-approximation
//! confidence intervals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::episode::{sample_episode, Episode};
use super::model::{argmax, AlignNet, Stage};
use crate::dataset::{Dataset, SplitView};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

/// Protocol: episode geometry, count, and master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub u_query: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            u_query: 15,
            episodes: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    /// `1.96 * sd / sqrt(n)` with the sample standard deviation.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Result<Self> {
        let n = per_episode.len();
        if n < 2 {
            return Err(Error::invalid("evaluate", format!("need >= 2 episodes, got {n}")));
        }
        let mean = per_episode.iter().sum::<f64>() / n as f64;
        let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            mean,
            ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
            per_episode,
        })
    }

    /// CSV with one `episode,accuracy` row per episode.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,accuracy\n");
        for (i, a) in self.per_episode.iter().enumerate() {
            s.push_str(&format!("{i},{a}\n"));
        }
        s
    }
}

/// Episode `i` of a protocol, drawn from its own stream of the master seed.
pub fn protocol_episode(split: &SplitView, p: &EvalProtocol, i: usize) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(i as u64);
    sample_episode(split, p.n_way, p.k_shot, p.u_query, &mut rng)
}

/// Accuracy of an arbitrary predictor that maps an episode to one label per
/// query.
pub fn evaluate_with<F>(split: &SplitView, p: &EvalProtocol, predict: F) -> Result<EvalReport>
where
    F: Fn(&Episode) -> Result<Vec<usize>> + Sync,
{
    if p.episodes < 2 {
        return Err(Error::invalid("evaluate", format!("need >= 2 episodes, got {}", p.episodes)));
    }
    let acc = (0..p.episodes)
        .into_par_iter()
        .map(|i| {
            let e = protocol_episode(split, p, i)?;
            let pred = predict(&e)?;
            if pred.len() != e.query.len() {
                return Err(Error::invalid("evaluate", "one prediction per query required"));
            }
            let hits = pred.iter().zip(&e.query).filter(|(a, q)| **a == q.1).count();
            Ok(hits as f64 / e.query.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_accuracies(acc)
}

/// Inference-mode features of every image in `idx` (post-FOE when the stage
/// enables it), keyed by dataset index.
pub fn feature_cache<T: Real>(
    net: &AlignNet,
    params: &ParamStore<T>,
    ds: &Dataset,
    idx: &[usize],
    stage: Stage,
) -> Result<std::collections::HashMap<usize, Tensor<T>>> {
    const CHUNK: usize = 32;
    let chunks: Vec<&[usize]> = idx.chunks(CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|chunk| {
            let mut ctx = Ctx::inference(params);
            let x = ctx.input(ds.batch::<T>(chunk, None));
            let f = net.features(&mut ctx, x)?;
            let f = if stage.foe { net.foe.forward(&mut ctx, f)?.0 } else { f };
            let v = ctx.graph.value(f);
            let per = v.len() / chunk.len();
            let shape = v.shape()[1..].to_vec();
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| (i, Tensor::new(&shape, v.data()[j * per..(j + 1) * per].to_vec()).expect("slab")))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Model accuracy on `split` under `stage`; features are computed once per
/// image and episodes reuse them.
pub fn evaluate_model<T: Real>(
    net: &AlignNet,
    params: &ParamStore<T>,
    ds: &Dataset,
    split: &SplitView,
    stage: Stage,
    p: &EvalProtocol,
) -> Result<EvalReport> {
    let cache = feature_cache(net, params, ds, &split.indices(), stage)?;
    evaluate_with(split, p, |e| {
        let mut ctx = Ctx::inference(params);
        let feats: Vec<&Tensor<T>> = e.image_indices().iter().map(|i| &cache[i]).collect();
        let shape = [vec![feats.len()], feats[0].shape().to_vec()].concat();
        let data: Vec<T> = feats.iter().flat_map(|t| t.data().iter().copied()).collect();
        let f = ctx.input(Tensor::new(&shape, data)?);
        let fwd = net.classify_features(&mut ctx, f, &e.support_labels(), e.n_way, stage)?;
        let logits = ctx.graph.value(fwd.logits).to_f64_vec();
        Ok(logits.chunks(e.n_way).map(argmax).collect())
    })
}
