use spalign::config::RunConfig;
use spalign::datagen::{domain_shift, CorpusSpec, DomainShift, Split};
use spalign::dataset::Dataset;
use spalign::meta::{evaluate_model, meta_train, pretrain, AlignNet, Checkpoint, LogRecord, Phase, Stage};
use spalign::Error;

fn corpus() -> CorpusSpec {
    CorpusSpec {
        n_base: 6,
        n_val: 5,
        n_novel: 5,
        per_class: 8,
        image_size: 64,
        ..CorpusSpec::default()
    }
}

/// Seconds-scale configuration: 32 px input, 8-channel backbone.
fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(
        &[
            "data.input_size=32",
            "backbone.channels=8,8,8,8",
            "model.head_classes=6",
            "episode.query=3",
            "val.episodes=10",
            "pretrain.epochs=2",
            "pretrain.batch_size=16",
            "pretrain.milestones=1",
            "meta_lsc.epochs=2",
            "meta_lsc.batches=2",
            "meta_lsc.episodes_per_batch=2",
            "meta_ssm.epochs=1",
            "meta_ssm.batches=2",
            "meta_ssm.episodes_per_batch=2",
            "eval.query=3",
            "eval.episodes=30",
        ]
        .map(String::from),
    )
    .unwrap();
    c
}

fn dataset(cfg: &RunConfig) -> Dataset {
    Dataset::render(&corpus(), cfg.model.backbone.input_size, None).unwrap()
}

/// Pretrain, then meta_lsc, then meta_ssm; returns the log lines and the
/// final checkpoint.
fn three_phase(cfg: &RunConfig, ds: &Dataset) -> (String, Checkpoint) {
    let net = AlignNet::new(cfg.model.clone()).unwrap();
    let mut log = String::new();
    let mut push = |r: &LogRecord| log.push_str(&format!("{r}\n"));
    let setup = cfg.setup();
    let pre = pretrain(&net, ds, &setup, &cfg.pretrain, &mut push).unwrap().best;
    let lsc = meta_train(&net, ds, &setup, &cfg.meta_lsc, &pre, &mut push).unwrap().best;
    let ssm = meta_train(&net, ds, &setup, &cfg.meta_ssm, &lsc, &mut push).unwrap().best;
    (log, ssm)
}

#[test]
fn seeded_runs_are_byte_identical_and_checkpoints_reload() {
    let cfg = tiny_config();
    let ds = dataset(&cfg);
    let (log_a, ck_a) = three_phase(&cfg, &ds);
    let (log_b, ck_b) = three_phase(&cfg, &ds);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.lines().count(), 5);
    assert!(log_a.contains("phase=meta_ssm"));
    assert_eq!(ck_a.to_bytes(), ck_b.to_bytes());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    ck_a.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ck_a.to_bytes());
    let net = AlignNet::new(cfg.model.clone()).unwrap();
    let novel = ds.split(Split::Novel);
    let before = evaluate_model(&net, &ck_a.params, &ds, &novel, Stage::FULL, &cfg.eval).unwrap();
    let after = evaluate_model(&net, &back.params, &ds, &novel, Stage::FULL, &cfg.eval).unwrap();
    assert_eq!(before.per_episode, after.per_episode);
    assert_eq!(before.mean.to_bits(), after.mean.to_bits());
}

#[test]
fn different_seeds_diverge() {
    let cfg = tiny_config();
    let ds = dataset(&cfg);
    let net = AlignNet::new(cfg.model.clone()).unwrap();
    let run = |seed| {
        let mut log = String::new();
        let setup = spalign::meta::RunSetup { seed, ..cfg.setup() };
        pretrain(&net, &ds, &setup, &cfg.pretrain, |r| log.push_str(&r.to_string())).unwrap();
        log
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny_config();
    cfg.apply_overrides(&["pretrain.epochs=1".into()]).unwrap();
    let ds = dataset(&cfg);
    let net = AlignNet::new(cfg.model.clone()).unwrap();
    let setup = cfg.setup();
    let pre = pretrain(&net, &ds, &setup, &cfg.pretrain, |_| {}).unwrap().best;

    cfg.apply_overrides(&["meta_lsc.lr=0".into(), "meta_lsc.epochs=1".into(), "meta_lsc.batches=1".into()])
        .unwrap();
    let out = meta_train(&net, &ds, &setup, &cfg.meta_lsc, &pre, |_| {}).unwrap().best;
    for (name, p) in pre.params.iter() {
        if name.starts_with("head.") || !p.trainable {
            continue;
        }
        assert!(out.params.get(name).unwrap() == &p.value, "{name} moved with lr=0");
    }
}

#[test]
fn phase_order_is_enforced() {
    let cfg = tiny_config();
    let ds = dataset(&cfg);
    let net = AlignNet::new(cfg.model.clone()).unwrap();
    let setup = cfg.setup();
    let pre = pretrain(&net, &ds, &setup, &cfg.pretrain, |_| {}).unwrap().best;
    assert_eq!(pre.phase, Phase::Pretrain);
    let err = meta_train(&net, &ds, &setup, &cfg.meta_ssm, &pre, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("meta_lsc"), "{err}");

    let other = AlignNet::new(spalign::meta::ModelConfig {
        proj_channels: 2,
        ..cfg.model.clone()
    })
    .unwrap();
    let err = meta_train(&other, &ds, &setup, &cfg.meta_lsc, &pre, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn short_training_beats_chance() {
    let mut cfg = tiny_config();
    cfg.apply_overrides(&["pretrain.epochs=5".into(), "pretrain.milestones=3".into(), "val.episodes=40".into()])
        .unwrap();
    let ds = dataset(&cfg);
    let net = AlignNet::new(cfg.model.clone()).unwrap();
    let pre = pretrain(&net, &ds, &cfg.setup(), &cfg.pretrain, |_| {}).unwrap().best;
    assert!(pre.val_score > 0.2, "validation accuracy {}", pre.val_score);
}

#[test]
fn full_domain_shift_lowers_baseline_accuracy() {
    let spec = CorpusSpec { per_class: 20, ..corpus() };
    let mut cfg = tiny_config();
    cfg.apply_overrides(
        &["backbone.channels=16,16,16,16", "pretrain.epochs=8", "pretrain.milestones=6", "eval.episodes=300"]
            .map(String::from),
    )
    .unwrap();
    let size = cfg.model.backbone.input_size;
    let a = Dataset::render(&spec, size, None).unwrap();
    let net = AlignNet::new(cfg.model.clone()).unwrap();
    let pre = pretrain(&net, &a, &cfg.setup(), &cfg.pretrain, |_| {}).unwrap().best;
    let b = Dataset::render(&domain_shift(&spec, DomainShift::Full), size, Some(a.norm)).unwrap();
    let acc = |ds: &Dataset| {
        evaluate_model(&net, &pre.params, ds, &ds.split(Split::Novel), Stage::BASELINE, &cfg.eval)
            .unwrap()
            .mean
    };
    let (in_domain, cross) = (acc(&a), acc(&b));
    assert!(cross < in_domain, "in-domain {in_domain}, shifted {cross}");
}
