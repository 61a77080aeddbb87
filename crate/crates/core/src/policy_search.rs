//! Model-size accounting and the constrained search for a bitwidth policy.
//!
//! A policy's size is `Σ n_l·q_l` bits over the quantizable layers (plus
//! three 32-bit side parameters per layer when requested); its compression
//! ratio is the float size `32·Σ n_l` over that. A policy is feasible when
//! its ratio meets the target. Search maximizes validation accuracy of the
//! frozen hypernetwork's generated network over feasible policies only.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::policy::{BitRange, BitwidthPolicy};

use crate::datasets::DataView;
use crate::error::{Error, Result};
use crate::hypernet::{GenerationMode, MetaQuantNet};
use crate::target_net::{argmax_rows, infer, TargetNetSpec};

pub const FLOAT_BITS: u64 = 32;
/// γ, α and β stored at full precision for each layer.
pub const SIDE_PARAMS_PER_LAYER: u64 = 3;
pub const DEFAULT_EXHAUSTIVE_CAP: u128 = 10_000;
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConstraint {
    pub target_ratio: f64,
    #[serde(default)]
    pub include_side_params: bool,
}

impl CompressionConstraint {
    pub fn new(target_ratio: f64, include_side_params: bool) -> Result<Self> {
        let c = CompressionConstraint { target_ratio, include_side_params };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio.is_finite() && self.target_ratio > 1.0) {
            return Err(Error::Config(format!(
                "target ratio must be a finite value above 1, got {}",
                self.target_ratio
            )));
        }
        if !self.include_side_params && self.target_ratio > FLOAT_BITS as f64 {
            return Err(Error::Infeasible(format!(
                "target ratio {}x exceeds the {FLOAT_BITS}x bound of 1-bit weights",
                self.target_ratio
            )));
        }
        Ok(())
    }
}

pub fn float_size_bits(spec: &TargetNetSpec) -> u64 {
    FLOAT_BITS * spec.quantizable_layers().map(|l| l.weight_count as u64).sum::<u64>()
}

pub fn model_size_bits(
    policy: &BitwidthPolicy,
    spec: &TargetNetSpec,
    constraint: &CompressionConstraint,
) -> Result<u64> {
    policy.check_len(spec.quantizable_count())?;
    let side = if constraint.include_side_params { SIDE_PARAMS_PER_LAYER * FLOAT_BITS } else { 0 };
    Ok(spec
        .quantizable_layers()
        .zip(policy.bits())
        .map(|(l, &q)| l.weight_count as u64 * q as u64 + side)
        .sum())
}

pub fn compression_ratio(
    policy: &BitwidthPolicy,
    spec: &TargetNetSpec,
    constraint: &CompressionConstraint,
) -> Result<f64> {
    Ok(float_size_bits(spec) as f64 / model_size_bits(policy, spec, constraint)? as f64)
}

pub fn is_feasible(
    policy: &BitwidthPolicy,
    spec: &TargetNetSpec,
    constraint: &CompressionConstraint,
) -> Result<bool> {
    Ok(compression_ratio(policy, spec, constraint)? >= constraint.target_ratio)
}

/// Top-1 accuracy of the target network generated for `policy`.
pub fn evaluate_policy(
    net: &MetaQuantNet,
    spec: &TargetNetSpec,
    policy: &BitwidthPolicy,
    data: &DataView,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty subset".into()));
    }
    let layers = net.materialize(policy, GenerationMode::Quantized)?;
    let mut correct = 0usize;
    for rows in data.ordered_batches(EVAL_BATCH) {
        let batch = data.features.select_rows(&rows)?;
        let predictions = argmax_rows(&infer(spec, &layers, &batch)?);
        correct += rows
            .iter()
            .zip(predictions)
            .filter(|&(&r, p)| data.labels[r] == p)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossover {
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub population_size: usize,
    pub generations: usize,
    pub parent_count: usize,
    pub mutation_prob: f64,
    pub crossover: Crossover,
    pub bit_range: BitRange,
    /// Size of the fixed validation subset used as fitness.
    pub eval_samples: usize,
    /// Redraws allowed per offspring before a random feasible replacement.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population_size: 50,
            generations: 20,
            parent_count: 10,
            mutation_prob: 0.1,
            crossover: Crossover::Uniform,
            bit_range: BitRange::full(),
            eval_samples: 1024,
            max_retries: 100,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.generations == 0 {
            return Err(Error::Config("population_size and generations must be positive".into()));
        }
        if self.parent_count == 0 || self.parent_count > self.population_size {
            return Err(Error::Config(format!(
                "parent_count {} must be in [1, population_size = {}]",
                self.parent_count, self.population_size
            )));
        }
        if !(self.mutation_prob > 0.0 && self.mutation_prob < 1.0) {
            return Err(Error::Config(format!(
                "mutation_prob must be in (0, 1), got {}",
                self.mutation_prob
            )));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        Ok(())
    }

    /// The validation subset used for fitness: the first `eval_samples`.
    pub fn fitness_subset(&self, val: &DataView) -> Result<DataView> {
        val.head(self.eval_samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedPolicy {
    pub policy: BitwidthPolicy,
    pub ratio: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_accuracy: f64,
    pub mean_accuracy: f64,
    pub best_policy: BitwidthPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub target_ratio: f64,
    pub include_side_params: bool,
    pub bit_range: BitRange,
    pub best_policy: BitwidthPolicy,
    pub best_ratio: f64,
    pub best_accuracy: f64,
    pub generations: Vec<GenerationStats>,
    pub evaluation_count: usize,
    /// Every distinct policy evaluated, in first-evaluation order.
    pub evaluated: Vec<EvaluatedPolicy>,
}

/// Ranking: higher accuracy, then higher ratio, then lexicographically
/// smaller policy.
fn rank(a: &EvaluatedPolicy, b: &EvaluatedPolicy) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(b.ratio.total_cmp(&a.ratio))
        .then_with(|| a.policy.cmp(&b.policy))
}

struct Problem<'a> {
    spec: &'a TargetNetSpec,
    constraint: &'a CompressionConstraint,
    range: BitRange,
    layers: usize,
}

impl Problem<'_> {
    fn feasible(&self, p: &BitwidthPolicy) -> bool {
        is_feasible(p, self.spec, self.constraint).unwrap_or(false)
    }

    fn check_solvable(&self) -> Result<()> {
        self.constraint.validate()?;
        let floor = BitwidthPolicy::uniform(self.layers, self.range.min())?;
        if !self.feasible(&floor) {
            return Err(Error::Infeasible(format!(
                "even {floor} reaches only {:.3}x, below the {}x target",
                compression_ratio(&floor, self.spec, self.constraint)?,
                self.constraint.target_ratio
            )));
        }
        Ok(())
    }

    /// Rejection sampling, then repair by lowering random genes.
    fn random_feasible(&self, rng: &mut ChaCha8Rng, retries: usize) -> BitwidthPolicy {
        for _ in 0..retries.max(1) {
            let p = BitwidthPolicy::random(self.layers, self.range, rng);
            if self.feasible(&p) {
                return p;
            }
        }
        let mut p = BitwidthPolicy::random(self.layers, self.range, rng);
        while !self.feasible(&p) {
            let reducible: Vec<usize> =
                (0..self.layers).filter(|&i| p.bits()[i] > self.range.min()).collect();
            let i = reducible[rng.random_range(0..reducible.len())];
            p.bits_mut()[i] -= 1;
        }
        p
    }

    fn offspring(&self, parents: &[BitwidthPolicy], config: &SearchConfig, rng: &mut ChaCha8Rng) -> BitwidthPolicy {
        for _ in 0..config.max_retries {
            let a = &parents[rng.random_range(0..parents.len())];
            let b = &parents[rng.random_range(0..parents.len())];
            let mut child = a.clone();
            for (i, gene) in child.bits_mut().iter_mut().enumerate() {
                if rng.random_bool(0.5) {
                    *gene = b.bits()[i];
                }
                if rng.random_bool(config.mutation_prob) {
                    *gene = self.range.sample(rng);
                }
            }
            if self.feasible(&child) {
                return child;
            }
        }
        self.random_feasible(rng, config.max_retries)
    }
}

/// Evaluates the policies not yet in `cache`, in parallel, and appends them
/// to `log` in input order.
fn evaluate_new(
    net: &MetaQuantNet,
    problem: &Problem<'_>,
    subset: &DataView,
    policies: &[BitwidthPolicy],
    cache: &mut HashMap<BitwidthPolicy, usize>,
    log: &mut Vec<EvaluatedPolicy>,
) -> Result<()> {
    let mut fresh: Vec<BitwidthPolicy> = Vec::new();
    for p in policies {
        if !cache.contains_key(p) && !fresh.contains(p) {
            fresh.push(p.clone());
        }
    }
    let results: Vec<Result<EvaluatedPolicy>> = fresh
        .par_iter()
        .map(|p| {
            debug_assert!(problem.feasible(p));
            Ok(EvaluatedPolicy {
                policy: p.clone(),
                ratio: compression_ratio(p, problem.spec, problem.constraint)?,
                accuracy: evaluate_policy(net, problem.spec, p, subset)?,
            })
        })
        .collect();
    for r in results {
        let e = r?;
        cache.insert(e.policy.clone(), log.len());
        log.push(e);
    }
    Ok(())
}

/// Genetic search for the most accurate feasible policy.
///
/// Every individual of every generation satisfies the constraint. Each
/// generation keeps the top `parent_count` distinct policies and fills the
/// rest of the population with uniform-crossover offspring of random parent
/// pairs, mutated per gene with `mutation_prob`.
pub fn genetic_search(
    net: &MetaQuantNet,
    spec: &TargetNetSpec,
    constraint: &CompressionConstraint,
    config: &SearchConfig,
    val: &DataView,
) -> Result<SearchReport> {
    config.validate()?;
    let problem = Problem {
        spec,
        constraint,
        range: config.bit_range,
        layers: spec.quantizable_count(),
    };
    problem.check_solvable()?;
    if net.block_count() != problem.layers {
        return Err(Error::Policy(format!(
            "hypernetwork has {} blocks but {} has {} quantizable layers",
            net.block_count(),
            spec.name,
            problem.layers
        )));
    }
    let subset = config.fitness_subset(val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cache: HashMap<BitwidthPolicy, usize> = HashMap::new();
    let mut log: Vec<EvaluatedPolicy> = Vec::new();

    let mut population: Vec<BitwidthPolicy> = (0..config.population_size)
        .map(|_| problem.random_feasible(&mut rng, config.max_retries))
        .collect();
    let mut stats = Vec::with_capacity(config.generations);

    for generation in 0..config.generations {
        evaluate_new(net, &problem, &subset, &population, &mut cache, &mut log)?;
        let members: Vec<&EvaluatedPolicy> = population.iter().map(|p| &log[cache[p]]).collect();
        let mean = members.iter().map(|e| e.accuracy).sum::<f64>() / members.len() as f64;

        let mut ranked: Vec<&EvaluatedPolicy> = members.clone();
        ranked.sort_by(|a, b| rank(a, b));
        ranked.dedup_by(|a, b| a.policy == b.policy);
        stats.push(GenerationStats {
            generation,
            best_accuracy: ranked[0].accuracy,
            mean_accuracy: mean,
            best_policy: ranked[0].policy.clone(),
        });

        if generation + 1 == config.generations {
            break;
        }
        let parents: Vec<BitwidthPolicy> =
            ranked.iter().take(config.parent_count).map(|e| e.policy.clone()).collect();
        let mut next = parents.clone();
        while next.len() < config.population_size {
            next.push(problem.offspring(&parents, config, &mut rng));
        }
        population = next;
    }

    let best = log
        .iter()
        .min_by(|a, b| rank(a, b))
        .expect("at least one evaluation")
        .clone();
    Ok(SearchReport {
        target_ratio: constraint.target_ratio,
        include_side_params: constraint.include_side_params,
        bit_range: config.bit_range,
        best_policy: best.policy,
        best_ratio: best.ratio,
        best_accuracy: best.accuracy,
        generations: stats,
        evaluation_count: log.len(),
        evaluated: log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub best: EvaluatedPolicy,
    pub feasible_count: usize,
}

/// Evaluates every feasible policy in `range` and returns the best one under
/// the same ranking as [`genetic_search`].
pub fn exhaustive_search(
    net: &MetaQuantNet,
    spec: &TargetNetSpec,
    constraint: &CompressionConstraint,
    range: BitRange,
    subset: &DataView,
    cap: u128,
) -> Result<ExhaustiveResult> {
    constraint.validate()?;
    let layers = spec.quantizable_count();
    let size = (range.width() as u128).checked_pow(layers as u32).unwrap_or(u128::MAX);
    if size > cap {
        return Err(Error::SearchSpaceTooLarge { size, cap });
    }
    let problem = Problem { spec, constraint, range, layers };
    let mut feasible = Vec::new();
    let mut bits = vec![range.min(); layers];
    loop {
        let p = BitwidthPolicy::new(bits.clone())?;
        if problem.feasible(&p) {
            feasible.push(p);
        }
        // odometer increment, last gene fastest
        let mut i = layers;
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            if bits[i] < range.max() {
                bits[i] += 1;
                break;
            }
            bits[i] = range.min();
        }
        if bits.iter().all(|&b| b == range.min()) {
            break;
        }
    }
    if feasible.is_empty() {
        return Err(Error::Infeasible(format!(
            "no policy in {range} reaches {}x",
            constraint.target_ratio
        )));
    }
    let mut cache = HashMap::new();
    let mut log = Vec::new();
    evaluate_new(net, &problem, subset, &feasible, &mut cache, &mut log)?;
    let best = log.iter().min_by(|a, b| rank(a, b)).expect("nonempty").clone();
    Ok(ExhaustiveResult { best, feasible_count: feasible.len() })
}

/// Bitwidths normalized by `q_max`, one row per layer, as CSV.
pub fn normalized_bitwidth_csv(policy: &BitwidthPolicy, q_max: u8) -> String {
    let mut out = String::from("layer,bits,normalized\n");
    for (i, (&b, n)) in policy.bits().iter().zip(policy.normalized(q_max)).enumerate() {
        out.push_str(&format!("{i},{b},{n}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target_net::{Activation, LayerPlan};

    fn two_layer_spec(n1: usize, n2: usize) -> TargetNetSpec {
        // dense 1→n1 then n1→(n2/n1); pick shapes so the counts match
        let hidden = n1;
        let classes = n2 / hidden;
        TargetNetSpec::compose(
            "toy",
            &[1],
            classes,
            &[
                LayerPlan::Dense { out: hidden, activation: Activation::Relu },
                LayerPlan::Dense { out: classes, activation: Activation::None },
            ],
        )
        .unwrap()
    }

    fn off(ratio: f64) -> CompressionConstraint {
        CompressionConstraint { target_ratio: ratio, include_side_params: false }
    }

    #[test]
    fn size_arithmetic() {
        let spec = two_layer_spec(100, 300);
        assert_eq!(spec.quantizable_weight_counts(), vec![100, 300]);
        let p = BitwidthPolicy::new(vec![1, 3]).unwrap();
        assert_eq!(model_size_bits(&p, &spec, &off(2.0)).unwrap(), 1000);

        let with_side = CompressionConstraint { target_ratio: 2.0, include_side_params: true };
        assert_eq!(model_size_bits(&p, &spec, &with_side).unwrap(), 1000 + 2 * 96);
    }

    #[test]
    fn single_layer_four_bits() {
        let spec = TargetNetSpec::compose(
            "one",
            &[500],
            2,
            &[LayerPlan::Dense { out: 2, activation: Activation::None }],
        )
        .unwrap();
        let p = BitwidthPolicy::uniform(1, 4).unwrap();
        let bits = model_size_bits(&p, &spec, &off(2.0)).unwrap();
        assert_eq!((bits, bits / 8), (4000, 500));
    }

    #[test]
    fn uniform_ratio_is_32_over_q() {
        let spec = two_layer_spec(100, 300);
        for q in 1..=8u8 {
            let p = BitwidthPolicy::uniform(2, q).unwrap();
            assert_eq!(compression_ratio(&p, &spec, &off(2.0)).unwrap(), 32.0 / q as f64);
        }
    }

    #[test]
    fn mixed_ratio_equal_layers() {
        let spec = two_layer_spec(10, 100);
        // weight counts 10 and 100 are not equal; build an equal pair instead
        let equal = TargetNetSpec::compose(
            "eq",
            &[10],
            10,
            &[
                LayerPlan::Dense { out: 10, activation: Activation::Relu },
                LayerPlan::Dense { out: 10, activation: Activation::None },
            ],
        )
        .unwrap();
        assert_eq!(spec.quantizable_count(), 2);
        let p = BitwidthPolicy::new(vec![1, 5]).unwrap();
        let r = compression_ratio(&p, &equal, &off(2.0)).unwrap();
        assert!((r - 32.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constraint_bounds() {
        assert!(matches!(CompressionConstraint::new(33.0, false), Err(Error::Infeasible(_))));
        assert!(CompressionConstraint::new(33.0, true).is_ok());
        assert!(CompressionConstraint::new(1.0, false).is_err());
        assert!(CompressionConstraint::new(f64::NAN, false).is_err());
    }

    #[test]
    fn search_config_validation() {
        let mut c = SearchConfig::default();
        c.validate().unwrap();
        c.parent_count = 60;
        assert!(c.validate().is_err());
        c = SearchConfig { mutation_prob: 1.0, ..SearchConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_normalization() {
        let p = BitwidthPolicy::new(vec![8, 2, 8]).unwrap();
        assert_eq!(normalized_bitwidth_csv(&p, 8), "layer,bits,normalized\n0,8,1\n1,2,0.25\n2,8,1\n");
    }
}
