//! Target network descriptions and their forward pass.
//!
//! The target network owns no parameters: every layer's weight and bias are
//! supplied by the caller as tape variables, so gradients flow back into
//! whatever produced them (normally the hypernetwork).
//!
//! Dense weights are laid out `[in, out]` (`y = x·W + b`); convolution
//! kernels are `[filters, channels, kh, kw]`. Biases are always full
//! precision and do not count toward model size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Dense,
    /// Square-kernel convolution, optionally followed by 2×2 max pooling.
    Conv2d { stride: usize, padding: usize, pool: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub weight_shape: Vec<usize>,
    pub weight_count: usize,
    pub quantizable: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weight_shape[1],
            LayerKind::Conv2d { .. } => self.weight_shape[0],
        }
    }

    /// Number of inputs feeding one output unit.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weight_shape[0],
            LayerKind::Conv2d { .. } => self.weight_shape[1..].iter().product(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetNetSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape (without the batch axis).
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

/// Weight and bias for one target layer, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub weight: Var,
    pub bias: Var,
}

/// Builder entry for one layer; shapes are inferred while composing.
#[derive(Debug, Clone, Copy)]
pub enum LayerPlan {
    Dense { out: usize, activation: Activation },
    Conv { filters: usize, kernel: usize, stride: usize, padding: usize, pool: bool },
}

pub const BUILTIN_NAMES: [&str; 2] = ["mlp-3", "cnn-5"];

/// Looks up a built-in architecture, sized for the given per-sample input
/// shape and class count.
///
/// - `mlp-3`: flatten → dense 64 (ReLU) → dense 32 (ReLU) → dense K.
/// - `cnn-5`: input `C×H×W`; conv 3×3 C→4 (ReLU) → conv 3×3 4→8 (ReLU, pool)
///   → conv 3×3 8→8 (ReLU, pool) → dense 32 (ReLU) → dense K. All convolutions
///   use stride 1 and padding 1, so `H` and `W` must be at least 4.
pub fn builtin_spec(name: &str, input_shape: &[usize], class_count: usize) -> Result<TargetNetSpec> {
    let relu = Activation::Relu;
    let plan: Vec<LayerPlan> = match name {
        "mlp-3" => vec![
            LayerPlan::Dense { out: 64, activation: relu },
            LayerPlan::Dense { out: 32, activation: relu },
            LayerPlan::Dense { out: class_count, activation: Activation::None },
        ],
        "cnn-5" => {
            let conv = |filters, pool| LayerPlan::Conv { filters, kernel: 3, stride: 1, padding: 1, pool };
            vec![
                conv(4, false),
                conv(8, true),
                conv(8, true),
                LayerPlan::Dense { out: 32, activation: relu },
                LayerPlan::Dense { out: class_count, activation: Activation::None },
            ]
        }
        other => return Err(Error::Lookup(other.to_string())),
    };
    TargetNetSpec::compose(name, input_shape, class_count, &plan)
}

impl TargetNetSpec {
    /// Composes layer shapes from a plan. Every layer is quantizable.
    pub fn compose(
        name: &str,
        input_shape: &[usize],
        class_count: usize,
        plan: &[LayerPlan],
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        if class_count < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {class_count}")));
        }
        let mut current = input_shape.to_vec();
        let mut layers = Vec::with_capacity(plan.len());
        for (index, step) in plan.iter().enumerate() {
            let layer = match *step {
                LayerPlan::Dense { out, activation } => {
                    let fan_in: usize = current.iter().product();
                    current = vec![out];
                    LayerSpec {
                        index,
                        kind: LayerKind::Dense,
                        weight_shape: vec![fan_in, out],
                        weight_count: fan_in * out,
                        quantizable: true,
                        activation,
                    }
                }
                LayerPlan::Conv { filters, kernel, stride, padding, pool } => {
                    let &[c, h, w] = current.as_slice() else {
                        return Err(Error::Spec {
                            layer: index,
                            message: format!("convolution needs a C×H×W input, got {current:?}"),
                        });
                    };
                    if h + 2 * padding < kernel || w + 2 * padding < kernel || stride == 0 {
                        return Err(Error::Spec {
                            layer: index,
                            message: format!("kernel {kernel} does not fit input {h}×{w}"),
                        });
                    }
                    let mut oh = (h + 2 * padding - kernel) / stride + 1;
                    let mut ow = (w + 2 * padding - kernel) / stride + 1;
                    if pool {
                        if oh < 2 || ow < 2 {
                            return Err(Error::Spec {
                                layer: index,
                                message: format!("cannot pool a {oh}×{ow} map"),
                            });
                        }
                        oh /= 2;
                        ow /= 2;
                    }
                    current = vec![filters, oh, ow];
                    LayerSpec {
                        index,
                        kind: LayerKind::Conv2d { stride, padding, pool },
                        weight_shape: vec![filters, c, kernel, kernel],
                        weight_count: filters * c * kernel * kernel,
                        quantizable: true,
                        activation: Activation::Relu,
                    }
                }
            };
            layers.push(layer);
        }
        if current != [class_count] {
            return Err(Error::Config(format!(
                "network output {current:?} does not match {class_count} classes"
            )));
        }
        Ok(TargetNetSpec {
            name: name.to_string(),
            layers,
            input_shape: input_shape.to_vec(),
            class_count,
        })
    }

    pub fn quantizable_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.quantizable)
    }

    pub fn quantizable_count(&self) -> usize {
        self.quantizable_layers().count()
    }

    /// Weight counts of the quantizable layers, in order.
    pub fn quantizable_weight_counts(&self) -> Vec<usize> {
        self.quantizable_layers().map(|l| l.weight_count).collect()
    }
}

/// Runs the target network on `batch` (shape `N × input_shape`) with the
/// supplied per-layer parameters and returns `N × class_count` logits.
pub fn forward_with_weights(
    tape: &mut Tape,
    spec: &TargetNetSpec,
    params: &[LayerParams],
    batch: Var,
) -> Result<Var> {
    if params.len() != spec.layers.len() {
        return Err(Error::Spec {
            layer: params.len().min(spec.layers.len()),
            message: format!(
                "{} parameter sets supplied for {} layers",
                params.len(),
                spec.layers.len()
            ),
        });
    }
    let in_shape = tape.shape(batch).to_vec();
    if in_shape.len() != spec.input_shape.len() + 1 || in_shape[1..] != spec.input_shape[..] {
        return Err(Error::Spec {
            layer: 0,
            message: format!(
                "batch shape {in_shape:?} does not match input shape {:?}",
                spec.input_shape
            ),
        });
    }
    let n = in_shape[0];
    let mut x = batch;
    for (layer, p) in spec.layers.iter().zip(params) {
        let spec_err = |message: String| Error::Spec { layer: layer.index, message };
        let w_shape = tape.shape(p.weight).to_vec();
        if w_shape != layer.weight_shape {
            return Err(spec_err(format!(
                "weight shape {w_shape:?}, expected {:?}",
                layer.weight_shape
            )));
        }
        if tape.value(p.bias).len() != layer.bias_len() {
            return Err(spec_err(format!(
                "bias of length {}, expected {}",
                tape.value(p.bias).len(),
                layer.bias_len()
            )));
        }
        let annotate = |e: Error| match e {
            Error::Dimension(m) => spec_err(m),
            other => other,
        };
        x = match layer.kind {
            LayerKind::Dense => {
                if tape.shape(x).len() != 2 {
                    x = tape.reshape(x, vec![n, layer.weight_shape[0]]).map_err(annotate)?;
                }
                let y = tape.matmul(x, p.weight).map_err(annotate)?;
                tape.add_bias(y, p.bias)?
            }
            LayerKind::Conv2d { stride, padding, .. } => {
                let y = tape.conv2d(x, p.weight, stride, padding).map_err(annotate)?;
                tape.add_bias(y, p.bias)?
            }
        };
        if layer.activation == Activation::Relu {
            x = tape.relu(x)?;
        }
        if let LayerKind::Conv2d { pool: true, .. } = layer.kind {
            x = tape.max_pool2(x)?;
        }
    }
    Ok(x)
}

/// Logits for `batch` using concrete `(weight, bias)` pairs, without
/// recording gradients.
pub fn infer(spec: &TargetNetSpec, layers: &[(Tensor, Tensor)], batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params: Vec<LayerParams> = layers
        .iter()
        .map(|(w, b)| LayerParams { weight: tape.constant(w.clone()), bias: tape.constant(b.clone()) })
        .collect();
    let x = tape.constant(batch.clone());
    let logits = forward_with_weights(&mut tape, spec, &params, x)?;
    Ok(tape.value(logits).clone())
}

/// Index of the largest logit in each row (first one on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(tape: &mut Tape, spec: &TargetNetSpec, fill: f32) -> Vec<LayerParams> {
        spec.layers
            .iter()
            .map(|l| LayerParams {
                weight: tape.constant(Tensor::full(l.weight_shape.clone(), fill).unwrap()),
                bias: tape.constant(Tensor::zeros(vec![l.bias_len()]).unwrap()),
            })
            .collect()
    }

    #[test]
    fn catalog_layer_counts() {
        let mlp = builtin_spec("mlp-3", &[2], 3).unwrap();
        assert_eq!(mlp.quantizable_count(), 3);
        assert_eq!(mlp.quantizable_weight_counts(), vec![128, 2048, 96]);
        let cnn = builtin_spec("cnn-5", &[1, 12, 12], 3).unwrap();
        assert_eq!(cnn.quantizable_count(), 5);
        assert_eq!(cnn.quantizable_weight_counts(), vec![36, 288, 576, 2304, 96]);
        assert!(matches!(builtin_spec("vgg99", &[2], 3), Err(Error::Lookup(_))));
    }

    #[test]
    fn cnn_needs_image_input() {
        assert!(builtin_spec("cnn-5", &[2], 3).is_err());
    }

    #[test]
    fn identity_dense_network() {
        let plan = [LayerPlan::Dense { out: 3, activation: Activation::None }];
        let spec = TargetNetSpec::compose("id", &[3], 3, &plan).unwrap();
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let params = [LayerParams {
            weight: tape.constant(eye),
            bias: tape.constant(Tensor::zeros(vec![3]).unwrap()),
        }];
        let input = [0.5, -1.0, 2.0, 3.0, 0.0, 0.25];
        let x = tape.constant(Tensor::new(vec![2, 3], input.to_vec()).unwrap());
        let logits = forward_with_weights(&mut tape, &spec, &params, x).unwrap();
        assert_eq!(tape.value(logits).data(), &input);
    }

    #[test]
    fn zero_weights_give_ln_k_loss() {
        let spec = builtin_spec("cnn-5", &[1, 8, 8], 4).unwrap();
        let mut tape = Tape::new();
        let params = bind(&mut tape, &spec, 0.0);
        let x = tape.constant(Tensor::full(vec![2, 1, 8, 8], 0.3).unwrap());
        let logits = forward_with_weights(&mut tape, &spec, &params, x).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let spec = builtin_spec("mlp-3", &[2], 3).unwrap();
        let mut tape = Tape::new();
        let mut params = bind(&mut tape, &spec, 0.1);
        params[1].weight = tape.constant(Tensor::zeros(vec![64, 31]).unwrap());
        let x = tape.constant(Tensor::zeros(vec![1, 2]).unwrap());
        match forward_with_weights(&mut tape, &spec, &params, x) {
            Err(Error::Spec { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected spec error, got {other:?}"),
        }
        let bad_batch = tape.constant(Tensor::zeros(vec![1, 3]).unwrap());
        let params = bind(&mut tape, &spec, 0.1);
        assert!(matches!(
            forward_with_weights(&mut tape, &spec, &params, bad_batch),
            Err(Error::Spec { layer: 0, .. })
        ));
    }
}
