//! Command-line surface: `gen`, `train`, `eval`, `viz`, `ablate`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablate::{self, resolve_model, Event};
use crate::config::RunConfig;
use crate::datagen::{self, CorpusSpec, DomainShift, Split};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::export;
use crate::meta::{evaluate_model, meta_train, pretrain, AlignNet, Checkpoint, EvalProtocol, Phase, Stage};
use crate::nn::Ctx;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Parser)]
#[command(name = "spalign", version, about = "Spatially aligned few-shot fine-grained classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (PPM images, manifest, spec).
    Gen(GenArgs),
    /// Run one training phase and write the best checkpoint plus metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint over random episodes.
    Eval(EvalArgs),
    /// Export heatmaps, correlation matrices and offset fields for one pair.
    Viz(VizArgs),
    /// Sweep stages over seeds and write one combined CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// key=value corpus spec file; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Spec override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shift applied to the corpus spec before generation: none, palette or full.
    #[arg(long, default_value = "none")]
    pub shift: String,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// key=value run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Corpus directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub phase: Phase,
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint of the preceding phase.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "novel")]
    pub split: Split,
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    #[arg(long, default_value_t = 15)]
    pub query: usize,
    #[arg(long, default_value_t = 2000)]
    pub episodes: usize,
    /// Stage to run; defaults to the checkpoint's stage.
    #[arg(long)]
    pub stage: Option<Stage>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for `report.txt` and `episodes.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub support: PathBuf,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stage: Option<Stage>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn resolve_run(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(d) = &args.data {
        cfg.data_dir = d.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => CorpusSpec::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => CorpusSpec::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{o}` is not key=value")))?;
        spec.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let spec = datagen::domain_shift(&spec, a.shift.parse::<DomainShift>()?);
    let entries = datagen::generate(&spec, &a.out)?;
    println!("wrote {} images to {}", entries.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_run(&a.run)?;
    let init = match (a.phase.requires(), &a.init) {
        (Some(req), None) => {
            return Err(Error::Config(format!(
                "--phase {} requires --init with a {req} checkpoint",
                a.phase
            )))
        }
        (None, Some(_)) => return Err(Error::Config("pretraining starts from scratch; drop --init".into())),
        (_, Some(p)) => Some(Checkpoint::load(p)?),
        (None, None) => None,
    };
    let norm = init.as_ref().map(|c| c.norm);
    let ds = Dataset::load(&cfg.data_dir, cfg.model.backbone.input_size, norm)?;
    let model = match &init {
        Some(c) => c.model.clone(),
        None => resolve_model(&cfg, &ds),
    };
    let mut cfg = cfg;
    cfg.model = model.clone();
    mkdir(&a.out)?;
    write(&a.out.join("config.txt"), cfg.to_text())?;
    let net = AlignNet::new(model)?;
    let log_path = a.out.join("metrics.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let mut on_epoch = |r: &crate::meta::LogRecord| {
        println!("{r}");
        if let Err(e) = writeln!(log, "{r}") {
            io_err.get_or_insert(e);
        }
    };
    let setup = cfg.setup();
    let out = match &init {
        None => pretrain(&net, &ds, &setup, cfg.phase(a.phase), &mut on_epoch)?,
        Some(c) => meta_train(&net, &ds, &setup, cfg.phase(a.phase), c, &mut on_epoch)?,
    };
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    let ck = a.out.join("best.ckpt");
    out.best.save(&ck)?;
    println!(
        "best epoch {} val_acc {:.4} -> {}",
        out.best.epoch,
        out.best.val_score,
        ck.display()
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = Dataset::load(&a.data, ck.model.backbone.input_size, Some(ck.norm))?;
    let net = AlignNet::new(ck.model.clone())?;
    let stage = a.stage.unwrap_or(ck.stage);
    let split = ds.split(a.split);
    let protocol = EvalProtocol {
        n_way: a.way,
        k_shot: a.shot,
        u_query: a.query,
        episodes: a.episodes,
        seed: a.seed,
    };
    let rep = evaluate_model(&net, &ck.params, &ds, &split, stage, &protocol)?;
    let line = format!(
        "split={} stage={stage} way={} shot={} episodes={} accuracy={:.4} ± {:.4}",
        a.split,
        a.way,
        a.shot,
        a.episodes,
        rep.mean,
        rep.ci95
    );
    println!("{line}");
    if let Some(out) = &a.out {
        mkdir(out)?;
        write(&out.join("report.txt"), format!("{line}\n"))?;
        write(&out.join("episodes.csv"), rep.to_csv())?;
    }
    Ok(())
}

fn load_image(path: &Path, ck: &Checkpoint) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, c, body) = datagen::decode_pnm(&bytes)?;
    let rgb: Vec<u8> = if c == 3 {
        body
    } else {
        body.iter().flat_map(|&v| [v, v, v]).collect()
    };
    let s = ck.model.backbone.input_size;
    let chw = ck.norm.prepare(&rgb, w, h, s)?;
    Tensor::new(&[1, 3, s, s], chw)
}

/// Artifacts of one support/query pair; returns the written file names.
pub fn visualize(ck: &Checkpoint, support: &Tensor<f64>, query: &Tensor<f64>, stage: Stage, out: &Path) -> Result<Vec<String>> {
    let net = AlignNet::new(ck.model.clone())?;
    let params = ck.params.cast::<f64>();
    let mut ctx = Ctx::inference(&params);
    let s = ctx.input(support.clone());
    let q = ctx.input(query.clone());
    let x = ctx.graph.concat(s, q, 0)?;
    let f = net.features(&mut ctx, x)?;
    let fs = ctx.graph.index_select(f, &[0])?;
    let fq = ctx.graph.index_select(f, &[1])?;
    let shape = ctx.graph.shape(fs).to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let fs3 = ctx.graph.reshape(fs, &[c, h, w])?;
    let fq3 = ctx.graph.reshape(fq, &[c, h, w])?;
    let pair = net.align_pair(&mut ctx, fs3, fq3, stage)?;
    mkdir(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        write(&out.join(name), bytes)?;
        written.push(name.to_string());
        Ok(())
    };
    let g = &ctx.graph;
    let heat = |v: Var| channel_heat(&g.value(v).to_f64_vec(), c, h, w);
    emit("heat_query.pgm", heat(pair.query)?)?;
    emit("heat_support.pgm", heat(pair.support)?)?;
    if let Some(m) = pair.masks {
        let mv = g.value(m).to_f64_vec();
        emit("mask_support.pgm", export::mask_pgm(&mv[..h * w], h, w))?;
        emit("mask_query.pgm", export::mask_pgm(&mv[h * w..], h, w))?;
    }
    if let Some(l) = pair.trace.lsc {
        emit("heat_support_lsc.pgm", heat(l.aligned)?)?;
        let hw = h * w;
        let raw = g.value(l.raw).to_f64_vec();
        let norm = g.value(l.normalized).to_f64_vec();
        emit("corr_raw.pgm", export::heatmap_pgm(&raw, hw, hw))?;
        emit("corr_raw.csv", export::matrix_csv(&raw, hw, hw).into_bytes())?;
        emit("corr_norm.pgm", export::heatmap_pgm(&norm, hw, hw))?;
        emit("corr_norm.csv", export::matrix_csv(&norm, hw, hw).into_bytes())?;
    }
    if let Some(sm) = pair.trace.ssm {
        emit("heat_support_ssm.pgm", heat(sm.resampled)?)?;
        emit("offsets.csv", export::offsets_csv(&g.value(sm.offsets).to_f64_vec(), h, w)?.into_bytes())?;
    }
    Ok(written)
}

fn channel_heat(data: &[f64], c: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    Ok(export::heatmap_pgm(&export::channel_max(data, c, h, w)?, h, w))
}

pub fn cmd_viz(a: &VizArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let s = load_image(&a.support, &ck)?;
    let q = load_image(&a.query, &ck)?;
    let files = visualize(&ck, &s, &q, a.stage.unwrap_or(ck.stage), &a.out)?;
    println!("wrote {} to {}", files.join(", "), a.out.display());
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = resolve_run(&a.run)?;
    let ds = Dataset::load(&cfg.data_dir, cfg.model.backbone.input_size, None)?;
    mkdir(&a.out)?;
    write(&a.out.join("config.txt"), cfg.to_text())?;
    let log_path = a.out.join("metrics.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut io_err = None;
    let report = ablate::run(&cfg, &ds, |e| {
        let line = match e {
            Event::Epoch { seed, stage, record } => format!("seed={seed} stage={stage} {record}"),
            Event::Evaluated(r) => format!(
                "seed={} stage={} accuracy={:.4} ci95={:.4}",
                r.seed, r.stage, r.accuracy, r.ci95
            ),
        };
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io(&log_path, e));
    }
    let csv = report.to_csv(&cfg.ablate_stages);
    write(&a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Caps the global thread pool from `ALIGN_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ALIGN_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("ALIGN_THREADS=`{v}` is not a positive integer")))?;
        if n == 0 {
            return Err(Error::Config("ALIGN_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Viz(a) => cmd_viz(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}
