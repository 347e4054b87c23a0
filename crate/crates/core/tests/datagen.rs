use std::collections::BTreeSet;
use std::fs;

use spalign::datagen::{
    class_table, domain_shift, generate, read_manifest, render, split_summary, CorpusSpec, DomainShift, Split,
};
use spalign::dataset::Dataset;
use spalign::meta::{sample_episode, EvalProtocol};

fn small() -> CorpusSpec {
    CorpusSpec {
        n_base: 6,
        n_val: 3,
        n_novel: 5,
        per_class: 6,
        image_size: 48,
        rotation_deg: 20.0,
        translation: 4.0,
        ..CorpusSpec::default()
    }
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_byte_identical_corpora() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&small(), a.path()).unwrap();
    generate(&small(), b.path()).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(ta.len(), small().n_classes() * small().per_class + 2);
    assert!(ta == tb);

    let c = tempfile::tempdir().unwrap();
    generate(&CorpusSpec { seed: 2, ..small() }, c.path()).unwrap();
    assert!(tree_bytes(c.path()) != ta);
}

#[test]
fn manifest_splits_are_disjoint_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small();
    generate(&spec, dir.path()).unwrap();
    let entries = read_manifest(dir.path()).unwrap();
    assert_eq!(entries.len(), spec.n_classes() * spec.per_class);
    let summary = split_summary(&entries);
    let classes = |s: Split| summary[&s].keys().copied().collect::<BTreeSet<_>>();
    let (b, v, n) = (classes(Split::Base), classes(Split::Val), classes(Split::Novel));
    assert_eq!((b.len(), v.len(), n.len()), (spec.n_base, spec.n_val, spec.n_novel));
    assert!(b.is_disjoint(&v) && b.is_disjoint(&n) && v.is_disjoint(&n));
    for per in summary.values() {
        assert!(per.values().all(|&k| k == spec.per_class));
    }
    for e in &entries {
        assert!(dir.path().join(&e.path).is_file());
    }
}

#[test]
fn degenerate_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        CorpusSpec { per_class: 0, ..small() },
        CorpusSpec { n_base: 0, n_val: 0, n_novel: 0, ..small() },
    ] {
        assert!(generate(&bad, dir.path()).is_err());
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Pixel-space nearest-centroid accuracy over `episodes` 5-way 1-shot
/// episodes of the novel split.
fn nearest_centroid_accuracy(spec: &CorpusSpec, episodes: usize) -> f64 {
    let ds = Dataset::render(spec, spec.image_size, None).unwrap();
    let split = ds.split(Split::Novel);
    let p = EvalProtocol {
        u_query: 3,
        episodes,
        ..EvalProtocol::default()
    };
    let mut correct = 0;
    let mut total = 0;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
    let px = |i: usize| ds.image(i).iter().map(|&v| v as f64).collect::<Vec<_>>();
    for _ in 0..p.episodes {
        let ep = sample_episode(&split, p.n_way, p.k_shot, p.u_query, &mut rng).unwrap();
        let protos: Vec<Vec<f64>> = ep.support.iter().map(|&(i, _)| px(i)).collect();
        for &(i, label) in &ep.query {
            let q = px(i);
            let pred = (0..protos.len())
                .min_by(|&a, &b| sq_dist(&q, &protos[a]).total_cmp(&sq_dist(&q, &protos[b])))
                .unwrap();
            correct += usize::from(ep.support[pred].1 == label);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[test]
fn zero_nuisance_is_solved_by_nearest_centroid() {
    let spec = CorpusSpec { delta: 1.0, ..small() }.without_nuisance();
    assert_eq!(nearest_centroid_accuracy(&spec, 20), 1.0);
}

fn intra_class_variance(spec: &CorpusSpec) -> f64 {
    let table = class_table(spec).unwrap();
    let mut total = 0.0;
    for class in 0..spec.n_classes() {
        let imgs: Vec<Vec<f64>> = (0..spec.per_class)
            .map(|i| render(spec, &table, class, i).rgb.iter().map(|&v| v as f64).collect())
            .collect();
        let n = imgs.len() as f64;
        let d = imgs[0].len();
        for j in 0..d {
            let mean = imgs.iter().map(|im| im[j]).sum::<f64>() / n;
            total += imgs.iter().map(|im| (im[j] - mean).powi(2)).sum::<f64>() / n;
        }
    }
    total
}

#[test]
fn nuisance_increases_intra_class_variance() {
    let none = small().without_nuisance();
    let max = CorpusSpec {
        rotation_deg: 45.0,
        translation: 6.0,
        scale_lo: 0.8,
        scale_hi: 1.2,
        clutter: 20.0,
        decoys: 8.0,
        ..small()
    };
    max.validate().unwrap();
    let (a, b) = (intra_class_variance(&none), intra_class_variance(&max));
    assert!(b > a, "variance {a} -> {b}");
}

#[test]
fn palette_swap_keeps_motif_pixels() {
    let spec = small();
    let swapped = domain_shift(&spec, DomainShift::Palette);
    assert_ne!(spec.palette, swapped.palette);
    let table = class_table(&spec).unwrap();
    assert_eq!(table, class_table(&swapped).unwrap());
    let mut differs = false;
    for class in [0, 7, 13] {
        for i in 0..3 {
            let (a, b) = (render(&spec, &table, class, i), render(&swapped, &table, class, i));
            assert_eq!(a.motif_mask, b.motif_mask);
            assert!(a.motif_mask.iter().any(|&m| m));
            differs |= a.rgb != b.rgb;
        }
    }
    assert!(differs, "palette swap left every image unchanged");
}

#[test]
fn zero_shift_is_the_same_corpus() {
    let spec = small();
    assert_eq!(domain_shift(&spec, DomainShift::None), spec);
    let full = domain_shift(&spec, DomainShift::Full);
    assert!(full.clutter > spec.clutter && full.palette != spec.palette);
}
