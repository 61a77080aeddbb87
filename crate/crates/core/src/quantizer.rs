//! Uniform weight quantization with min-max scaling.
//!
//! A weight tensor `W` is mapped to the unit interval by
//! `s = (W - β) / α` with `α = max(W) - min(W)` and `β = min(W)`, snapped to
//! one of `2^q` equally spaced levels by `round((2^q - 1)·s) / (2^q - 1)`,
//! and mapped back as `Ŵ = α·level + β`. Rounding is half away from zero.
//!
//! The rounding step has zero derivative almost everywhere, so training uses
//! the straight-through rule: the upstream gradient of `Ŵ` is passed to `W`
//! unchanged where `|W| < Δ` and zeroed elsewhere.
//!
//! Scaling and level arithmetic run in `f64`; the two range endpoints are
//! returned as the original `f32` values so `min` and `max` are exact fixed
//! points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SurrogateGrad, Tape, Tensor, Var};
use crate::policy::{MAX_BITS, MIN_BITS};

pub const DEFAULT_STE_CLIP: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    bits: u8,
    ste_clip: f32,
}

impl QuantizerConfig {
    pub fn new(bits: u8, ste_clip: f32) -> Result<Self> {
        check_bits(bits)?;
        if !(ste_clip > 0.0) {
            return Err(Error::Config(format!("STE clip Δ must be positive, got {ste_clip}")));
        }
        Ok(QuantizerConfig { bits, ste_clip })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn ste_clip(&self) -> f32 {
        self.ste_clip
    }
}

/// Min-max scaling parameters: `α` is the range, `β` the offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    pub alpha: f64,
    pub beta: f64,
    min: f32,
    max: f32,
}

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!(
            "bitwidth {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

fn level_count(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Index of the nearest level for a unit-interval value (clamped first).
fn level_index(x: f64, levels: u32) -> u32 {
    (x.clamp(0.0, 1.0) * levels as f64).round() as u32
}

/// Snaps values to the `2^q` levels `k / (2^q - 1)`. Inputs outside `[0,1]`
/// are clamped first.
pub fn quantize_unit(x: &[f32], bits: u8) -> Result<Vec<f32>> {
    check_bits(bits)?;
    let levels = level_count(bits);
    Ok(x
        .iter()
        .map(|&v| (level_index(v as f64, levels) as f64 / levels as f64) as f32)
        .collect())
}

pub fn scale_params(w: &[f32]) -> Result<ScaleParams> {
    let (&first, rest) = w
        .split_first()
        .ok_or_else(|| Error::Input("cannot scale an empty tensor".into()))?;
    let (min, max) = rest.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(ScaleParams { alpha: max as f64 - min as f64, beta: min as f64, min, max })
}

/// Maps `w` onto `[0,1]`. A constant tensor (`α = 0`) scales to all zeros.
pub fn scale_minmax(w: &[f32]) -> Result<(Vec<f32>, ScaleParams)> {
    let params = scale_params(w)?;
    let scaled = if params.alpha == 0.0 {
        vec![0.0; w.len()]
    } else {
        w.iter()
            .map(|&v| ((v as f64 - params.beta) / params.alpha) as f32)
            .collect()
    };
    Ok((scaled, params))
}

/// `Ŵ = α·Q((W - β)/α) + β`. Returns `W` unchanged when it is constant.
pub fn quantize_weights(w: &[f32], bits: u8) -> Result<Vec<f32>> {
    check_bits(bits)?;
    let p = scale_params(w)?;
    if p.alpha == 0.0 {
        return Ok(w.to_vec());
    }
    let levels = level_count(bits);
    Ok(w.iter()
        .map(|&v| {
            let k = level_index((v as f64 - p.beta) / p.alpha, levels);
            if k == 0 {
                p.min
            } else if k == levels {
                p.max
            } else {
                (p.beta + p.alpha * (k as f64 / levels as f64)) as f32
            }
        })
        .collect())
}

pub fn quantize_tensor(w: &Tensor, bits: u8) -> Result<Tensor> {
    Tensor::new(w.shape().to_vec(), quantize_weights(w.data(), bits)?)
}

/// Straight-through gradient: `upstream[i]` where `|w[i]| < Δ`, else 0.
pub fn ste_backward(upstream: &[f32], w: &[f32], ste_clip: f32) -> Result<Vec<f32>> {
    if upstream.len() != w.len() {
        return Err(Error::dim(format!(
            "upstream gradient of length {} for weights of length {}",
            upstream.len(),
            w.len()
        )));
    }
    Ok(upstream
        .iter()
        .zip(w)
        .map(|(&g, &v)| if v.abs() < ste_clip { g } else { 0.0 })
        .collect())
}

#[derive(Debug, Clone, Copy)]
struct StraightThrough {
    ste_clip: f32,
}

impl SurrogateGrad for StraightThrough {
    fn name(&self) -> &'static str {
        "quantize"
    }

    fn backward(&self, upstream: &[f32], input: &[f32]) -> Result<Vec<f32>> {
        ste_backward(upstream, input, self.ste_clip)
    }
}

/// Records `quantize_weights` on the tape with the straight-through rule as
/// its backward pass.
pub fn quantize_on_tape(tape: &mut Tape, w: Var, config: QuantizerConfig) -> Result<Var> {
    let out = quantize_tensor(tape.value(w), config.bits)?;
    tape.custom(w, out, Box::new(StraightThrough { ste_clip: config.ste_clip }))
}
