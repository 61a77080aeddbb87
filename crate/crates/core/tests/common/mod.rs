#![allow(dead_code)]

use metaquant::hypernet::{GenerationMode, HypernetConfig, MetaQuantNet};
use metaquant::quantizer::ste_backward;
use metaquant::target_net::{builtin_spec, forward_with_weights, Activation, LayerKind, TargetNetSpec};
use metaquant::{BitwidthPolicy, Tape, Tensor};
use metaquant_oracle::{self as oracle, RefLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TENSORS_PER_BLOCK: usize = 9;
pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn params_f64(net: &MetaQuantNet) -> Vec<Vec<f64>> {
    net.named_params()
        .into_iter()
        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn ref_layers(spec: &TargetNetSpec) -> Vec<RefLayer> {
    spec.layers
        .iter()
        .map(|l| {
            let relu = l.activation == Activation::Relu;
            match l.kind {
                LayerKind::Dense => RefLayer::Dense { inputs: l.weight_shape[0], outputs: l.weight_shape[1], relu },
                LayerKind::Conv2d { stride, padding, pool } => RefLayer::Conv {
                    filters: l.weight_shape[0],
                    kernel: l.weight_shape[2],
                    stride,
                    padding,
                    relu,
                    pool,
                },
            }
        })
        .collect()
}

/// `f64` loss of the whole pipeline. When `w_hat` is given it replaces each
/// block's pre-scale weights.
pub fn reference_loss(
    spec: &TargetNetSpec,
    params: &[Vec<f64>],
    hidden: usize,
    policy: &BitwidthPolicy,
    w_hat: Option<&[Vec<f64>]>,
    x: &[f64],
    labels: &[usize],
) -> f64 {
    assert!(spec.layers.iter().all(|l| l.quantizable));
    let layers: Vec<(Vec<f64>, Vec<f64>)> = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let p = &params[i * TENSORS_PER_BLOCK..(i + 1) * TENSORS_PER_BLOCK];
            let out = oracle::hyper_block(&p[..8], hidden, policy.bits()[i], layer.weight_count);
            let base = w_hat.map_or(out.w_float, |w| w[i].clone());
            (base.iter().map(|v| v * out.gamma).collect(), p[8].clone())
        })
        .collect();
    let logits = oracle::target_forward(&ref_layers(spec), &spec.input_shape, &layers, x, labels.len());
    oracle::cross_entropy(&logits, labels, spec.class_count)
}

/// Up to `count` distinct coordinates of a buffer of length `len`.
pub fn sample_coords<R: Rng>(len: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, count).into_vec()
}

pub fn random_vec<R: Rng>(len: usize, scale: f32, rng: &mut R) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

pub struct Fixture {
    pub spec: TargetNetSpec,
    pub net: MetaQuantNet,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub policy: BitwidthPolicy,
}

pub fn fixture(name: &str, input_shape: &[usize], seed: u64) -> Fixture {
    let classes = 3;
    let spec = builtin_spec(name, input_shape, classes).unwrap();
    let config = HypernetConfig { hidden: 8, ..HypernetConfig::default() };
    let mut net = MetaQuantNet::new(&spec, config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // move γ and the target biases away from their initial constants
    for b in net.blocks_mut() {
        let n = b.fc_g.weight.len();
        b.fc_g.weight.data_mut().copy_from_slice(&random_vec(n, 0.3, &mut rng));
        let n = b.target_bias.len();
        b.target_bias.data_mut().copy_from_slice(&random_vec(n, 0.1, &mut rng));
    }
    let n = 2;
    let per: usize = input_shape.iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(input_shape);
    let x = Tensor::new(shape, (0..n * per).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let layers = spec.quantizable_count();
    let policy = BitwidthPolicy::new((0..layers).map(|i| [2, 5, 8, 3, 1][i % 5]).collect()).unwrap();
    Fixture { spec, net, x, labels, policy }
}

pub struct TapeRun {
    pub tape: Tape,
    pub grads: Vec<Vec<f32>>,
    pub w_float: Vec<metaquant::Var>,
    pub w_hat: Vec<metaquant::Var>,
    pub gamma: Vec<metaquant::Var>,
}

pub fn run_tape(f: &Fixture, mode: GenerationMode) -> TapeRun {
    let mut tape = Tape::new();
    let bound = f.net.bind(&mut tape, true);
    let generated = f.net.generate(&mut tape, &bound, &f.policy, mode).unwrap();
    let x = tape.constant(f.x.clone());
    let logits = forward_with_weights(&mut tape, &f.spec, &generated.layers, x).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &f.labels).unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.grads(&tape).unwrap();
    TapeRun {
        grads,
        w_float: generated.traces.iter().map(|t| t.w_float).collect(),
        w_hat: generated.traces.iter().map(|t| t.w_hat).collect(),
        gamma: generated.traces.iter().map(|t| t.gamma).collect(),
        tape,
    }
}

/// Analytic and numeric gradients at a sample of coordinates of every
/// parameter tensor, with the quantizer replaced by the identity.
pub fn identity_pipeline_pairs(f: &Fixture, per_tensor: usize) -> (Vec<f64>, Vec<f64>) {
    let run = run_tape(f, GenerationMode::Identity);
    let params = params_f64(&f.net);
    let x = to_f64(f.x.data());
    let hidden = f.net.config().hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (t, grad) in run.grads.iter().enumerate() {
        let coords = sample_coords(grad.len(), per_tensor, &mut rng);
        let mut probe = params.clone();
        let fd = oracle::central_difference(
            |v| {
                probe[t].copy_from_slice(v);
                reference_loss(&f.spec, &probe, hidden, &f.policy, None, &x, &f.labels)
            },
            &params[t],
            &coords,
            FD_STEP,
        );
        analytic.extend(coords.iter().map(|&i| grad[i] as f64));
        numeric.extend(fd);
    }
    (analytic, numeric)
}

/// Pools coordinates over several random fixtures: ReLU and max-pool kinks
/// inside the step make individual coordinates disagree, and how many do
/// varies with the draw.
pub fn pooled_identity_agreement(name: &str, input_shape: &[usize], per_tensor: usize) -> oracle::Agreement {
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for seed in 0..8 {
        let (a, n) = identity_pipeline_pairs(&fixture(name, input_shape, seed), per_tensor);
        analytic.extend(a);
        numeric.extend(n);
    }
    oracle::agreement(&analytic, &numeric, REL_TOL, MAGNITUDE_FLOOR)
}

/// With the quantizer active, the gradient reaching `W_float` must be exactly
/// the gradient of `Ŵ` masked by `|W_float| < Δ`, and every hypernetwork
/// gradient the identity-path backward pass driven by that masked signal.
pub fn masked_identity_check(f: &Fixture) -> Result<(), String> {
    let q = run_tape(f, GenerationMode::Quantized);
    let clip = f.net.config().ste_clip;
    let mut masked = Vec::new();
    for (&wf, &wh) in q.w_float.iter().zip(&q.w_hat) {
        let expected = ste_backward(q.tape.grad(wh).unwrap(), q.tape.value(wf).data(), clip).unwrap();
        if q.tape.grad(wf).unwrap() != &expected[..] {
            return Err("W_float gradient is not the masked Ŵ gradient".into());
        }
        if expected.iter().all(|&g| g == 0.0) {
            return Err("mask removed every gradient".into());
        }
        masked.push(expected);
    }

    // Replay the generator alone, seeding W_float, γ and the biases with
    // the upstream gradients from the quantized run.
    let mut tape = Tape::new();
    let bound = f.net.bind(&mut tape, true);
    let generated = f.net.generate(&mut tape, &bound, &f.policy, GenerationMode::Identity).unwrap();
    let mut terms = Vec::new();
    for (i, trace) in generated.traces.iter().enumerate() {
        let seeds = [
            (trace.w_float, masked[i].clone()),
            (trace.gamma, q.tape.grad(q.gamma[i]).unwrap().to_vec()),
            (generated.layers[i].bias, q.grads[i * TENSORS_PER_BLOCK + 8].clone()),
        ];
        for (v, g) in seeds {
            let c = tape.constant(Tensor::new(tape.shape(v).to_vec(), g).unwrap());
            let prod = tape.mul(v, c).unwrap();
            terms.push(tape.sum(prod).unwrap());
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t).unwrap();
    }
    tape.backward(total).unwrap();
    if bound.grads(&tape).unwrap() != q.grads {
        return Err("hypernetwork gradients differ from the identity path".into());
    }
    Ok(())
}
