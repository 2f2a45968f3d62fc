//! Regression bounds on the default synthetic benchmark and metric oracles.

use rand::seq::SliceRandom;
use rand::Rng;
use spectralmoe::adapter::AdapterStack;
use spectralmoe::backbone::FrozenBackbone;
use spectralmoe::config::RunConfig;
use spectralmoe::gradcheck::randomize;
use spectralmoe::rng::rng_from;
use spectralmoe::synthbench::{
    class_frequencies, class_signatures, confusion_matrix, evaluate, generate_dataset, generate_scene,
    mean_band_change, BenchSpec, DomainShift,
};

fn default_spec(seed: u64, n: usize) -> BenchSpec {
    let cfg = RunConfig::default();
    BenchSpec {
        seed,
        height: cfg.height,
        width: cfg.width,
        classes: cfg.model.classes,
        channels: cfg.model.channels,
        n_source: n,
        n_target: n,
        shift: DomainShift::default_target(cfg.model.channels),
    }
}

#[test]
fn confusable_pair_covers_a_tenth_of_pixels() {
    let cfg = RunConfig::default();
    let k = cfg.model.classes;
    let (mut pair, mut total) = (0usize, 0usize);
    for seed in 0..100 {
        let s = generate_scene(seed, cfg.height, cfg.width, k, cfg.model.channels).unwrap();
        pair += s.labels.iter().filter(|&&l| l >= k - 2).count();
        total += s.labels.len();
    }
    let frac = pair as f64 / total as f64;
    assert!(frac >= 0.10, "pair fraction {frac}");
}

#[test]
fn confusable_pair_signatures_are_close() {
    let cfg = RunConfig::default();
    let sigs = class_signatures(cfg.model.classes, cfg.model.channels).unwrap();
    let k = sigs.len();
    let dist: f64 = sigs[k - 2].iter().zip(&sigs[k - 1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    assert!(dist < 0.05, "{dist}");
}

#[test]
fn default_shift_moves_band_means() {
    for seed in 0..20 {
        let d = generate_dataset(&default_spec(seed, 10)).unwrap();
        let change = mean_band_change(&d.source, &d.target);
        assert!(change >= 0.1, "seed {seed}: {change}");
    }
}

#[test]
fn shift_leaves_label_marginals_alone() {
    let d = generate_dataset(&default_spec(3, 100)).unwrap();
    let k = RunConfig::default().model.classes;
    let (a, b) = (class_frequencies(&d.source, k), class_frequencies(&d.target, k));
    for (c, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!((x - y).abs() < 0.02, "class {c}: {x} vs {y}");
    }
}

#[test]
fn confusion_matrix_matches_pixel_count() {
    let mut rng = rng_from(9);
    for _ in 0..10 {
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..200);
        let pairs: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..k), rng.random_range(0..k))).collect();
        let conf = confusion_matrix(pairs.iter().copied(), k).unwrap();
        for t in 0..k {
            for p in 0..k {
                let want = pairs.iter().filter(|&&(a, b)| a == t && b == p).count() as u64;
                assert_eq!(conf[t][p], want);
            }
        }
    }
}

#[test]
fn metrics_ignore_sample_order() {
    let cfg = RunConfig::default();
    let mut small = cfg.model.clone();
    small.d = 8;
    small.layers = 1;
    let mut stack = AdapterStack::init(&small, 1).unwrap();
    randomize(&mut stack, 2);
    let bb = FrozenBackbone::generate(3, small.channels, small.patch, small.d, small.layers);
    let data = generate_dataset(&default_spec(4, 12)).unwrap();
    let before = evaluate(&stack, &bb, &data.source).unwrap();
    let mut shuffled = data.source.clone();
    shuffled.shuffle(&mut rng_from(5));
    let after = evaluate(&stack, &bb, &shuffled).unwrap();
    assert_eq!(before, after);
}
