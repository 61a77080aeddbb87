use metaquant::datasets::{make_synthetic, DataView, Split, SplitFractions, SyntheticKind};
use metaquant::hypernet::{HypernetConfig, MetaQuantNet};
use metaquant::policy_search::{
    compression_ratio, evaluate_policy, exhaustive_search, genetic_search, is_feasible, model_size_bits,
    CompressionConstraint, SearchConfig, DEFAULT_EXHAUSTIVE_CAP,
};
use metaquant::target_net::{builtin_spec, TargetNetSpec};
use metaquant::trainer::{run_training, TrainConfig};
use metaquant::{BitRange, BitwidthPolicy, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn off(ratio: f64) -> CompressionConstraint {
    CompressionConstraint::new(ratio, false).unwrap()
}

struct Trained {
    spec: TargetNetSpec,
    net: MetaQuantNet,
    val: DataView,
}

/// A briefly meta-trained mlp-3 on noisy blobs, shared by the search tests.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = make_synthetic(SyntheticKind::Blobs, 1500, 3, 0.45, 7)
            .unwrap()
            .with_splits(SplitFractions { train: 0.6, val: 0.3, test: 0.1 }, 7)
            .unwrap();
        let spec = builtin_spec("mlp-3", &[2], 3).unwrap();
        let mut net = MetaQuantNet::new(&spec, HypernetConfig::default(), 7).unwrap();
        let (train, val) = (ds.view(Split::Train).unwrap(), ds.view(Split::Val).unwrap());
        let cfg = TrainConfig { epochs: 6, bit_range: BitRange::new(1, 3).unwrap(), ..TrainConfig::default() };
        run_training(&mut net, &spec, &train, &val, &cfg, None).unwrap();
        Trained { spec, net, val }
    })
}

#[test]
fn uniform_ratios_are_exact() {
    for spec in [builtin_spec("mlp-3", &[2], 3).unwrap(), builtin_spec("cnn-5", &[1, 12, 12], 4).unwrap()] {
        for q in 1..=8u8 {
            let p = BitwidthPolicy::uniform(spec.quantizable_count(), q).unwrap();
            assert_eq!(compression_ratio(&p, &spec, &off(2.0)).unwrap(), 32.0 / q as f64);
        }
    }
}

#[test]
fn two_bit_size_matches_published_accounting() {
    // 64·4178 + 64·32 + 32·10 = 269 760 weights, about the size of a small
    // residual net for ten classes
    let spec = builtin_spec("mlp-3", &[4178], 10).unwrap();
    let float_mb = 32.0 * 269_760.0 / 8.0 / 1e6;
    let p = BitwidthPolicy::uniform(3, 2).unwrap();
    let quant_mb = model_size_bits(&p, &spec, &off(16.0)).unwrap() as f64 / 8.0 / 1e6;
    assert_eq!(format!("{float_mb:.3}"), "1.079");
    assert_eq!(format!("{quant_mb:.3}"), "0.067");
    assert_eq!(compression_ratio(&p, &spec, &off(16.0)).unwrap(), 16.0);
    assert!(is_feasible(&p, &spec, &off(16.0)).unwrap());
    assert!(!is_feasible(&p, &spec, &off(16.5)).unwrap());
}

#[test]
fn side_parameters_add_three_words_per_layer() {
    let spec = builtin_spec("mlp-3", &[2], 3).unwrap();
    let p = BitwidthPolicy::new(vec![1, 2, 3]).unwrap();
    let with = CompressionConstraint::new(4.0, true).unwrap();
    let base = 128 + 2048 * 2 + 96 * 3;
    assert_eq!(model_size_bits(&p, &spec, &off(4.0)).unwrap(), base);
    assert_eq!(model_size_bits(&p, &spec, &with).unwrap(), base + 3 * 96);
}

#[test]
fn target_above_one_bit_bound_is_infeasible() {
    let t = trained();
    let cfg = SearchConfig::default();
    assert!(matches!(CompressionConstraint::new(33.0, false), Err(Error::Infeasible(_))));
    // with side parameters the bound drops below 32x
    let with = CompressionConstraint::new(31.99, true).unwrap();
    let err = genetic_search(&t.net, &t.spec, &with, &cfg, &t.val).unwrap_err();
    assert!(matches!(err, Error::Infeasible(_)), "{err}");
    let narrow = SearchConfig { bit_range: BitRange::new(3, 8).unwrap(), ..cfg };
    assert!(matches!(genetic_search(&t.net, &t.spec, &off(16.0), &narrow, &t.val), Err(Error::Infeasible(_))));
}

#[test]
fn singleton_range_returns_uniform_policy_in_first_generation() {
    let t = trained();
    let cfg = SearchConfig { bit_range: BitRange::new(2, 2).unwrap(), generations: 3, ..SearchConfig::default() };
    let report = genetic_search(&t.net, &t.spec, &off(16.0), &cfg, &t.val).unwrap();
    let uniform = BitwidthPolicy::uniform(3, 2).unwrap();
    assert_eq!(report.best_policy, uniform);
    assert_eq!(report.generations[0].best_policy, uniform);
    assert_eq!(report.evaluation_count, 1);
}

#[test]
fn exhaustive_singleton_and_empty() {
    let t = trained();
    let subset = t.val.head(200).unwrap();
    let one = exhaustive_search(&t.net, &t.spec, &off(16.0), BitRange::new(2, 2).unwrap(), &subset, 10).unwrap();
    assert_eq!(one.best.policy, BitwidthPolicy::uniform(3, 2).unwrap());
    assert_eq!(one.feasible_count, 1);
    let none = exhaustive_search(&t.net, &t.spec, &off(20.0), BitRange::new(2, 2).unwrap(), &subset, 10);
    assert!(matches!(none, Err(Error::Infeasible(_))));
    let big = exhaustive_search(&t.net, &t.spec, &off(4.0), BitRange::full(), &subset, 100);
    assert!(matches!(big, Err(Error::SearchSpaceTooLarge { size: 512, cap: 100 })));
}

#[test]
fn genetic_search_finds_exhaustive_optimum() {
    let t = trained();
    let range = BitRange::new(1, 3).unwrap();
    let constraint = off(12.0);
    let cfg = SearchConfig { bit_range: range, population_size: 20, generations: 5, ..SearchConfig::default() };
    let subset = cfg.fitness_subset(&t.val).unwrap();
    let exact = exhaustive_search(&t.net, &t.spec, &constraint, range, &subset, DEFAULT_EXHAUSTIVE_CAP).unwrap();
    assert_eq!(exact.feasible_count, 18);
    let hits = (0..4)
        .filter(|&seed| {
            let report = genetic_search(&t.net, &t.spec, &constraint, &SearchConfig { seed, ..cfg }, &t.val).unwrap();
            report.best_accuracy == exact.best.accuracy
        })
        .count();
    assert!(hits >= 3, "{hits}/4");
}

#[test]
fn every_individual_is_feasible_and_best_is_monotone() {
    let t = trained();
    let constraint = off(20.0);
    let cfg = SearchConfig { bit_range: BitRange::new(1, 5).unwrap(), generations: 6, seed: 3, ..SearchConfig::default() };
    let report = genetic_search(&t.net, &t.spec, &constraint, &cfg, &t.val).unwrap();
    assert!(!report.evaluated.is_empty());
    for e in &report.evaluated {
        assert!(e.ratio >= 20.0 && e.policy.within(cfg.bit_range), "{}", e.policy);
        assert_eq!(e.ratio, compression_ratio(&e.policy, &t.spec, &constraint).unwrap());
    }
    for w in report.generations.windows(2) {
        assert!(w[1].best_accuracy >= w[0].best_accuracy);
    }
    let best = report.evaluated.iter().map(|e| e.accuracy).fold(f64::MIN, f64::max);
    assert_eq!(report.best_accuracy, best);
    assert_eq!(report.generations.len(), 6);
}

#[test]
fn search_is_deterministic() {
    let t = trained();
    let cfg = SearchConfig { bit_range: BitRange::new(1, 5).unwrap(), generations: 4, seed: 11, ..SearchConfig::default() };
    let run = || serde_json::to_string(&genetic_search(&t.net, &t.spec, &off(16.0), &cfg, &t.val).unwrap()).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn evaluation_is_pure() {
    let t = trained();
    let p = BitwidthPolicy::new(vec![3, 1, 2]).unwrap();
    let a = evaluate_policy(&t.net, &t.spec, &p, &t.val).unwrap();
    assert_eq!(a, evaluate_policy(&t.net, &t.spec, &p, &t.val).unwrap());
}

#[test]
fn untrained_net_scores_near_chance() {
    // labels drawn independently of the inputs make every guess a fair
    // 1-in-K trial, whatever the network computes
    let k = 4;
    let ds = make_synthetic(SyntheticKind::Blobs, 2000, k, 0.1, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let labels = (0..ds.len()).map(|_| rng.random_range(0..k)).collect();
    let data = DataView { features: ds.features.clone(), labels };
    let spec = builtin_spec("mlp-3", &[2], k).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / data.len() as f64).sqrt();
    for seed in 0..5 {
        let net = MetaQuantNet::new(&spec, HypernetConfig::default(), 100 + seed).unwrap();
        let acc = evaluate_policy(&net, &spec, &BitwidthPolicy::uniform(3, 8).unwrap(), &data).unwrap();
        assert!((acc - p).abs() <= 3.0 * sigma, "seed {seed}: {acc}");
    }
}
