//! The weight-generating hypernetwork.
//!
//! One [`MetaBlock`] per quantizable target layer. A block receives only its
//! own layer's bitwidth `q`, encoded as the scalar `q/8`, and computes
//!
//! ```text
//! h1 = relu(fc1(q/8))        1 → h
//! h2 = relu(fc2(h1))         h → h
//! W  = fc_w(h2)              h → n_l   (float weights)
//! Ŵ  = quantize(W, q)                  (min-max scaled, 2^q levels)
//! γ  = fc_g(h2)              h → 1
//! out = reshape(γ·Ŵ)
//! ```
//!
//! Gradients reach `fc_w`, `fc2` and `fc1` through the straight-through rule
//! and `fc_g` through the ordinary product rule. Target-layer biases are
//! plain full-precision parameters carried alongside each block; they are not
//! generated from `q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::policy::{BitwidthPolicy, MAX_BITS, MIN_BITS};
use crate::quantizer::{quantize_on_tape, QuantizerConfig, DEFAULT_STE_CLIP};
use crate::target_net::{LayerParams, LayerSpec, TargetNetSpec};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HypernetConfig {
    pub hidden: usize,
    pub ste_clip: f32,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        HypernetConfig { hidden: DEFAULT_HIDDEN, ste_clip: DEFAULT_STE_CLIP }
    }
}

impl HypernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hypernet.hidden must be positive".into()));
        }
        QuantizerConfig::new(MAX_BITS, self.ste_clip)?;
        Ok(())
    }
}

/// How a block turns its float head output into target weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    Quantized,
    /// The quantizer is replaced by the identity (used for gradient checks).
    Identity,
}

/// Fully connected map `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut draw = |len: usize| -> Vec<f32> {
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        Dense {
            weight: Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape"),
            bias: Tensor::new(vec![fan_out], draw(fan_out)).expect("shape"),
        }
    }

    fn gamma_head(fan_in: usize) -> Self {
        Dense {
            weight: Tensor::zeros(vec![fan_in, 1]).expect("shape"),
            bias: Tensor::scalar(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaBlock {
    pub layer_index: usize,
    pub weight_shape: Vec<usize>,
    pub fc1: Dense,
    pub fc2: Dense,
    pub fc_w: Dense,
    pub fc_g: Dense,
    pub target_bias: Tensor,
}

impl MetaBlock {
    fn new(layer: &LayerSpec, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MetaBlock {
            layer_index: layer.index,
            weight_shape: layer.weight_shape.clone(),
            fc1: Dense::uniform(rng, 1, hidden),
            fc2: Dense::uniform(rng, hidden, hidden),
            fc_w: Dense::uniform(rng, hidden, layer.weight_count),
            fc_g: Dense::gamma_head(hidden),
            target_bias: Tensor::zeros(vec![layer.bias_len()]).expect("shape"),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("fc1.weight", &self.fc1.weight),
            ("fc1.bias", &self.fc1.bias),
            ("fc2.weight", &self.fc2.weight),
            ("fc2.bias", &self.fc2.bias),
            ("fc_w.weight", &self.fc_w.weight),
            ("fc_w.bias", &self.fc_w.bias),
            ("fc_g.weight", &self.fc_g.weight),
            ("fc_g.bias", &self.fc_g.bias),
            ("target_bias", &self.target_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.fc_w.weight,
            &mut self.fc_w.bias,
            &mut self.fc_g.weight,
            &mut self.fc_g.bias,
            &mut self.target_bias,
        ]
    }
}

/// Full-precision weights for a layer marked non-quantizable.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub layer_index: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Block(usize),
    Float(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaQuantNet {
    config: HypernetConfig,
    blocks: Vec<MetaBlock>,
    float_layers: Vec<FloatLayer>,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone, Copy)]
struct BoundDense {
    weight: Var,
    bias: Var,
}

#[derive(Debug, Clone, Copy)]
struct BoundBlock {
    fc1: BoundDense,
    fc2: BoundDense,
    fc_w: BoundDense,
    fc_g: BoundDense,
    target_bias: Var,
}

/// A network's parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundNet {
    blocks: Vec<BoundBlock>,
    floats: Vec<(Var, Var)>,
    order: Vec<Var>,
}

impl BoundNet {
    /// Parameter variables in [`MetaQuantNet::named_params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }

    /// Gradients in [`MetaQuantNet::named_params`] order, after `backward`.
    pub fn grads(&self, tape: &Tape) -> Result<Vec<Vec<f32>>> {
        self.order
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f32]>::to_vec)
                    .ok_or_else(|| Error::State("parameter gradient missing; run backward first".into()))
            })
            .collect()
    }
}

/// Intermediate variables of one block's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub w_float: Var,
    pub w_hat: Var,
    pub gamma: Var,
    pub weight: Var,
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Parameters for every target layer, in layer order.
    pub layers: Vec<LayerParams>,
    /// One trace per quantizable layer.
    pub traces: Vec<BlockTrace>,
}

fn encode_bits(bits: u8) -> Tensor {
    Tensor::new(vec![1, 1], vec![bits as f32 / MAX_BITS as f32]).expect("shape")
}

fn dense_on_tape(tape: &mut Tape, x: Var, d: BoundDense) -> Result<Var> {
    let y = tape.matmul(x, d.weight)?;
    tape.add_bias(y, d.bias)
}

impl MetaQuantNet {
    pub fn new(spec: &TargetNetSpec, config: HypernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if spec.quantizable_count() == 0 {
            return Err(Error::Config(format!("{} has no quantizable layers", spec.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut float_layers = Vec::new();
        let mut slots = Vec::new();
        for layer in &spec.layers {
            if layer.quantizable {
                slots.push(Slot::Block(blocks.len()));
                blocks.push(MetaBlock::new(layer, config.hidden, &mut rng));
            } else {
                slots.push(Slot::Float(float_layers.len()));
                let bound = 1.0 / (layer.fan_in() as f32).sqrt();
                let data = (0..layer.weight_count).map(|_| rng.random_range(-bound..bound)).collect();
                float_layers.push(FloatLayer {
                    layer_index: layer.index,
                    weight: Tensor::new(layer.weight_shape.clone(), data)?,
                    bias: Tensor::zeros(vec![layer.bias_len()])?,
                });
            }
        }
        Ok(MetaQuantNet { config, blocks, float_layers, slots })
    }

    pub fn config(&self) -> HypernetConfig {
        self.config
    }

    pub fn blocks(&self) -> &[MetaBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [MetaBlock] {
        &mut self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Every trainable tensor with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        for f in &self.float_layers {
            out.push((format!("float{}.weight", f.layer_index), &f.weight));
            out.push((format!("float{}.bias", f.layer_index), &f.bias));
        }
        out
    }

    /// Mutable view of the tensors in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        for f in &mut self.float_layers {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers all parameters on `tape`, as trainable parameters when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNet {
        let mut order = Vec::new();
        let mut reg = |tape: &mut Tape, t: &Tensor| {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            order.push(v);
            v
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut dense = |tape: &mut Tape, d: &Dense| BoundDense {
                weight: reg(tape, &d.weight),
                bias: reg(tape, &d.bias),
            };
            let fc1 = dense(tape, &b.fc1);
            let fc2 = dense(tape, &b.fc2);
            let fc_w = dense(tape, &b.fc_w);
            let fc_g = dense(tape, &b.fc_g);
            let target_bias = reg(tape, &b.target_bias);
            blocks.push(BoundBlock { fc1, fc2, fc_w, fc_g, target_bias });
        }
        let floats = self
            .float_layers
            .iter()
            .map(|f| (reg(tape, &f.weight), reg(tape, &f.bias)))
            .collect();
        BoundNet { blocks, floats, order }
    }

    fn block_on_tape(
        &self,
        tape: &mut Tape,
        index: usize,
        bound: &BoundBlock,
        bits: u8,
        mode: GenerationMode,
    ) -> Result<BlockTrace> {
        let quant = QuantizerConfig::new(bits, self.config.ste_clip)?;
        let code = tape.constant(encode_bits(bits));
        let h1 = dense_on_tape(tape, code, bound.fc1)?;
        let h1 = tape.relu(h1)?;
        let h2 = dense_on_tape(tape, h1, bound.fc2)?;
        let h2 = tape.relu(h2)?;
        let w_float = dense_on_tape(tape, h2, bound.fc_w)?;
        let w_hat = match mode {
            GenerationMode::Quantized => quantize_on_tape(tape, w_float, quant)?,
            GenerationMode::Identity => w_float,
        };
        let gamma = dense_on_tape(tape, h2, bound.fc_g)?;
        let scaled = tape.scale(w_hat, gamma)?;
        let weight = tape.reshape(scaled, self.blocks[index].weight_shape.clone())?;
        Ok(BlockTrace { w_float, w_hat, gamma, weight })
    }

    /// Generates every target layer's parameters on `tape` for `policy`.
    pub fn generate(
        &self,
        tape: &mut Tape,
        bound: &BoundNet,
        policy: &BitwidthPolicy,
        mode: GenerationMode,
    ) -> Result<Generated> {
        policy.check_len(self.blocks.len())?;
        let mut layers = Vec::with_capacity(self.slots.len());
        let mut traces = Vec::with_capacity(self.blocks.len());
        for slot in &self.slots {
            match *slot {
                Slot::Block(i) => {
                    let b = &bound.blocks[i];
                    let trace = self.block_on_tape(tape, i, b, policy.bits()[i], mode)?;
                    layers.push(LayerParams { weight: trace.weight, bias: b.target_bias });
                    traces.push(trace);
                }
                Slot::Float(i) => {
                    let (weight, bias) = bound.floats[i];
                    layers.push(LayerParams { weight, bias });
                }
            }
        }
        Ok(Generated { layers, traces })
    }

    /// Weight tensor produced by block `index` for bitwidth `bits`.
    pub fn block_forward(&self, index: usize, bits: u8) -> Result<Tensor> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(Error::Config(format!("bitwidth {bits} outside [{MIN_BITS}, {MAX_BITS}]")));
        }
        if index >= self.blocks.len() {
            return Err(Error::Policy(format!("no block {index}")));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let trace = self.block_on_tape(&mut tape, index, &bound.blocks[index], bits, GenerationMode::Quantized)?;
        Ok(tape.value(trace.weight).clone())
    }

    /// Concrete `(weight, bias)` pairs for every target layer under `policy`.
    pub fn materialize(&self, policy: &BitwidthPolicy, mode: GenerationMode) -> Result<Vec<(Tensor, Tensor)>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let generated = self.generate(&mut tape, &bound, policy, mode)?;
        Ok(generated
            .layers
            .iter()
            .map(|p| (tape.value(p.weight).clone(), tape.value(p.bias).clone()))
            .collect())
    }

    /// Quantized weights for every quantizable layer under `policy`.
    pub fn generate_weights(&self, policy: &BitwidthPolicy) -> Result<Vec<Tensor>> {
        policy.check_len(self.blocks.len())?;
        (0..self.blocks.len())
            .map(|i| self.block_forward(i, policy.bits()[i]))
            .collect()
    }
}
