//! Training the hypernetwork with SGD and momentum.
//!
//! In [`TrainMode::Train`] every minibatch draws a fresh policy uniformly
//! from the bit range, so the hypernetwork learns to emit good weights for
//! any bitwidth. Retraining and finetuning use one fixed policy for every
//! batch; retraining starts over from the configured seed, finetuning keeps
//! the current parameters.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::DataView;
use crate::error::{Error, Result};
use crate::hypernet::{GenerationMode, MetaQuantNet};
use crate::numerics::{Tape, Tensor};
use crate::policy::{BitRange, BitwidthPolicy};
use crate::policy_search::evaluate_policy;
use crate::target_net::{forward_with_weights, TargetNetSpec};

/// Batch size used when measuring the loss outside of training steps.
pub const LOSS_EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Train,
    Retrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warm_epochs: usize,
    pub halve_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_schedule: LrSchedule,
    pub bit_range: BitRange,
    /// Rescales each step's gradient to at most this global L2 norm; 0
    /// disables clipping.
    pub grad_clip_norm: f32,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr_initial: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule { warm_epochs: 12, halve_every: 6 },
            bit_range: BitRange::full(),
            grad_clip_norm: 0.5,
            seed: 0,
            mode: TrainMode::Train,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return Err(Error::Config(format!("lr_initial must be positive, got {}", self.lr_initial)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "grad_clip_norm must be non-negative, got {}",
                self.grad_clip_norm
            )));
        }
        if self.lr_schedule.halve_every == 0 {
            return Err(Error::Config("lr_schedule.halve_every must be positive".into()));
        }
        Ok(())
    }
}

/// `lr₀` before `warm_epochs`, then halved once on entering the decay phase
/// and again every `halve_every` epochs.
pub fn learning_rate(epoch: usize, config: &TrainConfig) -> f32 {
    let LrSchedule { warm_epochs, halve_every } = config.lr_schedule;
    if epoch < warm_epochs {
        return config.lr_initial;
    }
    let halvings = (epoch - warm_epochs) / halve_every + 1;
    (config.lr_initial as f64 * 0.5f64.powi(halvings as i32)) as f32
}

/// Draws each layer's bitwidth independently and uniformly from `range`.
pub fn sample_policy(layers: usize, range: BitRange, rng: &mut ChaCha8Rng) -> BitwidthPolicy {
    BitwidthPolicy::random(layers, range, rng)
}

/// Momentum SGD state: `v ← μv + g + λw`, `w ← w − ηv`, with `g` optionally
/// rescaled to a maximum global L2 norm first.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub clip_norm: Option<f32>,
    velocity: Vec<Vec<f32>>,
    /// Position reported when a step diverges.
    pub epoch: usize,
    pub step: usize,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum { lr, momentum, weight_decay, clip_norm: None, velocity: Vec::new(), epoch: 0, step: 0 }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Applies one update to `params` with matching `grads`.
    pub fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let norm = grads.iter().flatten().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if g.len() != p.len() || v.len() != p.len() {
                return Err(Error::dim("gradient length differs from parameter length"));
            }
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi * scale + self.weight_decay * *w;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

fn batch_loss_on_tape(
    tape: &mut Tape,
    net: &MetaQuantNet,
    spec: &TargetNetSpec,
    batch: &Tensor,
    labels: &[usize],
    policy: &BitwidthPolicy,
    trainable: bool,
) -> Result<(crate::numerics::Var, crate::hypernet::BoundNet)> {
    let bound = net.bind(tape, trainable);
    let generated = net.generate(tape, &bound, policy, GenerationMode::Quantized)?;
    let x = tape.constant(batch.clone());
    let logits = forward_with_weights(tape, spec, &generated.layers, x)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok((loss, bound))
}

/// One forward, backward and update on a minibatch; returns the loss before
/// the update.
pub fn train_step(
    net: &mut MetaQuantNet,
    spec: &TargetNetSpec,
    batch: &Tensor,
    labels: &[usize],
    policy: &BitwidthPolicy,
    optimizer: &mut SgdMomentum,
) -> Result<f32> {
    let diverged = |opt: &SgdMomentum, loss: f32| Error::Divergence {
        epoch: opt.epoch,
        step: opt.step,
        loss,
    };
    let mut tape = Tape::new();
    let (loss, bound) = match batch_loss_on_tape(&mut tape, net, spec, batch, labels, policy, true) {
        Ok(v) => v,
        Err(Error::NonFinite(_)) => return Err(diverged(optimizer, f32::NAN)),
        Err(e) => return Err(e),
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(diverged(optimizer, value));
    }
    match tape.backward(loss) {
        Ok(()) => {}
        Err(Error::NonFinite(_)) => return Err(diverged(optimizer, value)),
        Err(e) => return Err(e),
    }
    let grads = bound.grads(&tape)?;
    optimizer.apply(net.params_mut(), &grads)?;
    if net.named_params().iter().any(|(_, t)| !t.is_finite()) {
        return Err(diverged(optimizer, value));
    }
    optimizer.step += 1;
    Ok(value)
}

/// Sample-weighted mean cross-entropy over `data` under `policy`.
pub fn mean_loss(
    net: &MetaQuantNet,
    spec: &TargetNetSpec,
    data: &DataView,
    policy: &BitwidthPolicy,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot measure loss on an empty subset".into()));
    }
    let mut total = 0.0f64;
    for rows in data.ordered_batches(LOSS_EVAL_BATCH) {
        let batch = data.features.select_rows(&rows)?;
        let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
        let mut tape = Tape::new();
        let (loss, _) = batch_loss_on_tape(&mut tape, net, spec, &batch, &labels, policy, false)?;
        total += tape.value(loss).data()[0] as f64 * rows.len() as f64;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f32,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Validation accuracy for each probe policy, in report order.
    pub probe_accuracy: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub probe_policies: Vec<BitwidthPolicy>,
    pub rows: Vec<EpochRow>,
    /// Training-split loss under the reference policy before the first step.
    pub start_loss: Option<f64>,
    /// The same measurement after the last completed epoch.
    pub final_loss: Option<f64>,
    /// The policy used by each minibatch step, in order.
    pub step_policies: Vec<BitwidthPolicy>,
}

fn policy_tag(p: &BitwidthPolicy) -> String {
    p.bits().iter().map(u8::to_string).collect::<Vec<_>>().join("-")
}

impl TrainReport {
    /// One row per epoch. Wall-clock seconds are included only when asked so
    /// the remaining columns can be compared across runs.
    pub fn to_csv(&self, include_timing: bool) -> String {
        let mut out = String::from("epoch,lr,loss");
        for p in &self.probe_policies {
            out.push_str(&format!(",acc_{}", policy_tag(p)));
        }
        if include_timing {
            out.push_str(",seconds");
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.epoch, r.lr, r.loss));
            for a in &r.probe_accuracy {
                out.push_str(&format!(",{a}"));
            }
            if include_timing {
                out.push_str(&format!(",{:.3}", r.seconds));
            }
            out.push('\n');
        }
        out
    }
}

/// A training run stopped early; `partial` holds the completed epochs.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub partial: TrainReport,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training stopped after {} epochs: {}", self.partial.rows.len(), self.error)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        TrainAbort { error, partial: TrainReport::default() }
    }
}

/// Probe set: the fixed policy when present, else uniform `q_min` and `q_max`.
pub fn probe_policies(
    layers: usize,
    range: BitRange,
    fixed: Option<&BitwidthPolicy>,
) -> Result<Vec<BitwidthPolicy>> {
    if let Some(p) = fixed {
        return Ok(vec![p.clone()]);
    }
    let mut out = vec![BitwidthPolicy::uniform(layers, range.max())?];
    if range.min() != range.max() {
        out.push(BitwidthPolicy::uniform(layers, range.min())?);
    }
    Ok(out)
}

/// The policy used for `start_loss` and `final_loss`.
pub fn reference_policy(
    layers: usize,
    range: BitRange,
    fixed: Option<&BitwidthPolicy>,
) -> Result<BitwidthPolicy> {
    match fixed {
        Some(p) => Ok(p.clone()),
        None => BitwidthPolicy::uniform(layers, range.max()),
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs `config.epochs` epochs over `train`, probing accuracy on `val` after
/// each one.
///
/// `fixed_policy` must be `None` for [`TrainMode::Train`] and present for the
/// other modes. With zero epochs the net is left untouched and the report is
/// empty.
pub fn run_training(
    net: &mut MetaQuantNet,
    spec: &TargetNetSpec,
    train: &DataView,
    val: &DataView,
    config: &TrainConfig,
    fixed_policy: Option<&BitwidthPolicy>,
) -> std::result::Result<TrainReport, TrainAbort> {
    config.validate()?;
    let layers = spec.quantizable_count();
    match (config.mode, fixed_policy) {
        (TrainMode::Train, Some(_)) => {
            return Err(Error::Config("mode train samples policies; no fixed policy allowed".into()).into())
        }
        (TrainMode::Retrain | TrainMode::Finetune, None) => {
            return Err(Error::Config("retrain and finetune need a fixed policy".into()).into())
        }
        (_, Some(p)) => {
            p.check_len(layers)?;
            if !p.within(config.bit_range) {
                return Err(Error::Policy(format!("{p} lies outside {}", config.bit_range)).into());
            }
        }
        _ => {}
    }
    if config.epochs == 0 {
        return Ok(TrainReport::default());
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation splits must be non-empty".into()).into());
    }
    if config.mode == TrainMode::Retrain {
        *net = MetaQuantNet::new(spec, net.config(), config.seed)?;
    }

    let reference = reference_policy(layers, config.bit_range, fixed_policy)?;
    let mut report = TrainReport {
        probe_policies: probe_policies(layers, config.bit_range, fixed_policy)?,
        start_loss: Some(mean_loss(net, spec, train, &reference)?),
        ..TrainReport::default()
    };
    let mut policy_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = SgdMomentum::new(config.lr_initial, config.momentum, config.weight_decay);
    opt.clip_norm = (config.grad_clip_norm > 0.0).then_some(config.grad_clip_norm);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        opt.lr = learning_rate(epoch, config);
        opt.epoch = epoch;
        opt.step = 0;
        let mut loss_sum = 0.0f64;
        for rows in train.shuffled_batches(config.batch_size, epoch_seed(config.seed, epoch)) {
            let policy = match fixed_policy {
                Some(p) => p.clone(),
                None => sample_policy(layers, config.bit_range, &mut policy_rng),
            };
            let batch = train.features.select_rows(&rows).map_err(TrainAbort::from)?;
            let labels: Vec<usize> = rows.iter().map(|&r| train.labels[r]).collect();
            match train_step(net, spec, &batch, &labels, &policy, &mut opt) {
                Ok(loss) => loss_sum += loss as f64 * rows.len() as f64,
                Err(error) => return Err(TrainAbort { error, partial: report }),
            }
            report.step_policies.push(policy);
        }
        let probe_accuracy = report
            .probe_policies
            .iter()
            .map(|p| evaluate_policy(net, spec, p, val))
            .collect::<Result<Vec<_>>>();
        let probe_accuracy = match probe_accuracy {
            Ok(a) => a,
            Err(error) => return Err(TrainAbort { error, partial: report }),
        };
        report.rows.push(EpochRow {
            epoch,
            lr: opt.lr,
            loss: loss_sum / train.len() as f64,
            probe_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    match mean_loss(net, spec, train, &reference) {
        Ok(l) => report.final_loss = Some(l),
        Err(error) => return Err(TrainAbort { error, partial: report }),
    }
    Ok(report)
}
