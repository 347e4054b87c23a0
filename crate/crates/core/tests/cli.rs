use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spalign")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(out: Output) -> String {
    assert!(!out.status.success());
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--set", "n_base=6", "--set", "n_val=5", "--set", "n_novel=5", "--set", "per_class=8", "--set", "image_size=48",
];

fn small_corpus(dir: &Path) -> PathBuf {
    let out = dir.join("corpus");
    ok(spalign(&[&["gen", "--out", p(&out), "--seed", "3"][..], &SMALL].concat()));
    out
}

const TINY: &str = "\
data.input_size=32
backbone.channels=8,8,8,8
model.head_classes=0
episode.query=3
val.episodes=8
pretrain.epochs=2
pretrain.milestones=1
pretrain.batch_size=16
meta_lsc.epochs=1
meta_lsc.batches=2
meta_lsc.episodes_per_batch=2
meta_ssm.epochs=1
meta_ssm.batches=2
meta_ssm.episodes_per_batch=2
";

#[test]
fn gen_default_writes_the_full_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let stdout = ok(spalign(&["gen", "--out", p(&out)]));
    assert!(stdout.contains("2400"), "{stdout}");
    let manifest = fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 2400);
}

#[test]
fn gen_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(spalign(&[&["gen", "--out", p(d), "--seed", "7"][..], &SMALL].concat()));
    }
    let first = |d: &Path| fs::read(d.join("images/novel/c011_000.ppm")).unwrap();
    assert_eq!(fs::read(a.join("manifest.tsv")).unwrap(), fs::read(b.join("manifest.tsv")).unwrap());
    assert_eq!(first(&a), first(&b));
}

#[test]
fn usage_errors_exit_nonzero() {
    let err = fail(spalign(&["gen"]));
    assert!(err.contains("--out"), "{err}");
    fail(spalign(&["train", "--phase", "pretrain"]));
    let err = fail(spalign(&["gen", "--out", "/tmp/x", "--set", "colours=3"]));
    assert!(err.contains("colours"), "{err}");
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = fail(spalign(&["eval", "--checkpoint", "/no/such/best.ckpt", "--data", p(dir.path())]));
    assert!(err.contains("/no/such/best.ckpt"), "{err}");
    assert!(err.contains("I/O"), "{err}");
}

#[test]
fn meta_phase_requires_its_predecessor() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let err = fail(spalign(&["train", "--phase", "meta_lsc", "--out", p(&out)]));
    assert!(err.contains("pretrain"), "{err}");
    let err = fail(spalign(&["train", "--phase", "meta_ssm", "--out", p(&out)]));
    assert!(err.contains("meta_lsc"), "{err}");
}

/// Gen, three training phases, eval and viz on a seconds-scale corpus.
#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = small_corpus(d);
    let conf = d.join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let run = |phase: &str, init: Option<&Path>| {
        let out = d.join(phase);
        let mut args = vec!["train", "--phase", phase, "--config", p(&conf), "--data", p(&corpus), "--out", p(&out)];
        if let Some(i) = init {
            args.extend(["--init", p(i)]);
        }
        let stdout = ok(spalign(&args));
        assert!(stdout.contains(&format!("phase={phase}")), "{stdout}");
        assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("data.input_size=32"));
        out.join("best.ckpt")
    };
    let pre = run("pretrain", None);
    let lsc = run("meta_lsc", Some(&pre));
    let full = run("meta_ssm", Some(&lsc));

    // A pretraining checkpoint cannot seed meta_ssm.
    let err = fail(spalign(&[
        "train", "--phase", "meta_ssm", "--config", p(&conf), "--data", p(&corpus), "--init", p(&pre), "--out",
        p(&d.join("bad")),
    ]));
    assert!(err.contains("meta_lsc"), "{err}");

    let report = d.join("report");
    let stdout = ok(spalign(&[
        "eval", "--checkpoint", p(&full), "--data", p(&corpus), "--query", "3", "--episodes", "20", "--out", p(&report),
    ]));
    assert!(stdout.contains("accuracy=") && stdout.contains(" ± "), "{stdout}");
    assert_eq!(fs::read_to_string(report.join("episodes.csv")).unwrap().lines().count(), 21);

    // Five novel classes cannot fill a 6-way episode.
    let err = fail(spalign(&["eval", "--checkpoint", p(&full), "--data", p(&corpus), "--way", "6", "--query", "3"]));
    assert!(err.contains("capacity"), "{err}");

    let img = corpus.join("images/novel/c011_000.ppm");
    let other = corpus.join("images/novel/c012_003.ppm");
    let viz = |stage: &str, q: &Path| {
        let out = d.join(format!("viz_{stage}"));
        ok(spalign(&[
            "viz", "--checkpoint", p(&full), "--support", p(&img), "--query", p(q), "--stage", stage, "--out", p(&out),
        ]));
        let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        (out, names)
    };
    let (_, names) = viz("baseline", &other);
    assert_eq!(names, ["heat_query.pgm", "heat_support.pgm"]);
    let (out, names) = viz("full", &img);
    for f in ["mask_support.pgm", "corr_raw.csv", "corr_norm.pgm", "heat_support_lsc.pgm", "offsets.csv"] {
        assert!(names.iter().any(|n| n == f), "missing {f} in {names:?}");
    }
    let pgm = fs::read(out.join("heat_query.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));

    // Self-pair: each query position correlates best with itself.
    let csv = fs::read_to_string(out.join("corr_raw.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .filter_map(|l| l.split(',').map(|v| v.trim().parse().ok()).collect::<Option<Vec<f64>>>())
        .collect();
    assert_eq!(rows.len(), 16);
    let hits = rows
        .iter()
        .enumerate()
        .filter(|(i, r)| r.iter().all(|&v| v <= r[*i]))
        .count();
    assert!(hits as f64 >= 0.9 * rows.len() as f64, "{hits}/16 diagonal maxima");
}
