//! Low-bit hybrid weight quantization driven by a hypernetwork.
//!
//! A [`hypernet::MetaQuantNet`] holds one small fully connected block per
//! quantizable layer of a target network. Each block maps a bitwidth code to
//! that layer's quantized, γ-scaled weights. Training samples random
//! per-layer bitwidth policies; afterwards a genetic search over the frozen
//! hypernetwork picks the policy with the best validation accuracy that meets
//! a hard model-size constraint, and the winning policy is retrained.
//!
//! Module map:
//!
//! - [`numerics`]: dense `f32` tensors and a define-by-run reverse-mode tape.
//! - [`quantizer`]: uniform level quantizer, min-max scaling, straight-through rule.
//! - [`target_net`]: target architectures and their forward pass with supplied weights.
//! - [`hypernet`]: the per-layer weight generators.
//! - [`trainer`]: SGD with momentum, learning-rate schedule, training loops.
//! - [`policy_search`]: size accounting, feasibility, genetic and exhaustive search.
//! - [`datasets`]: synthetic generators and the IDX reader/writer.

pub mod datasets;
pub mod error;
pub mod hypernet;
pub mod numerics;
pub mod policy;
pub mod policy_search;
pub mod quantizer;
pub mod target_net;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
pub use policy::{BitRange, BitwidthPolicy};
