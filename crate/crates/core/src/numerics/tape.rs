//! Define-by-run reverse-mode tape.
//!
//! Every forward operation appends a node holding its output tensor and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes in
//! reverse recording order and accumulates gradients into every node that
//! depends on a parameter. A tape is built fresh for each forward pass.

use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{col2im, im2col, matmul_nn, matmul_nt, matmul_tn, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

/// Backward rule for an operation whose true derivative is replaced by a
/// surrogate (the quantizer's straight-through rule is the motivating case).
pub trait SurrogateGrad: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Maps the upstream gradient of the output to a gradient of the input,
    /// given the input values seen in the forward pass.
    fn backward(&self, upstream: &[f32], input: &[f32]) -> Result<Vec<f32>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var, channels: usize, inner: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: Var },
    Relu { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<f32> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Custom { x: Var, rule: Box<dyn SurrogateGrad> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Custom { rule, .. } => rule.name(),
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    recorded_ops: usize,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recorded_ops: 0,
            backward_done: false,
        }
    }

    /// Registers a trainable leaf; its gradient is populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, mut value: Tensor, param: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: param, param });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::State("variable belongs to a different tape".into()));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::State(format!("variable {} not on tape", v.index)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable from this tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// depends on a parameter.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.node(v).ok().and_then(|n| n.value.grad())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::State("cannot record after backward; build a new tape".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let mut requires_grad = false;
        for &v in inputs {
            requires_grad |= self.node(v)?.requires_grad;
        }
        self.nodes.push(Node { value, op, requires_grad, param: false });
        self.recorded_ops += 1;
        Ok(Var { tape: self.id, index: self.nodes.len() - 1 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new(vec![m, n], matmul_nn(ta.data(), tb.data(), m, k, n))?;
        self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Adds `bias[c]` to every element whose axis-1 index is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(bias)?.value);
        let shape = tx.shape();
        if shape.len() < 2 || tb.len() != shape[1] {
            return Err(Error::dim(format!("bias of {} for input {shape:?}", tb.len())));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(out, Op::AddBias { x, bias, channels, inner }, &[x, bias])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(Error::dim(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (&self.node(x)?.value, &self.node(s)?.value);
        if ts.len() != 1 {
            return Err(Error::dim(format!("scale factor must be scalar, got {:?}", ts.shape())));
        }
        let factor = ts.data()[0];
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::Scale { x, s }, &[x, s])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape)?;
        self.push(out, Op::Reshape { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.node(x)?.value.data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum { x }, &[x])
    }

    /// Cross-correlation of `input[N×C×H×W]` with `kernel[F×C×kh×kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ti, tk) = (&self.node(input)?.value, &self.node(kernel)?.value);
        let (si, sk) = (ti.shape(), tk.shape());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::dim(format!("conv2d of input {si:?} with kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (h, w, kh, kw) = (si[2], si[3], sk[2], sk[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            batch: si[0],
            channels: si[1],
            height: h,
            width: w,
            filters: sk[0],
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (patch, area) = (geom.patch_len(), geom.out_area());
        let mut cols = vec![0.0f32; geom.batch * patch * area];
        let mut out = Vec::with_capacity(geom.batch * geom.filters * area);
        for n in 0..geom.batch {
            let sample = &ti.data()[n * geom.in_sample_len()..(n + 1) * geom.in_sample_len()];
            let c = &mut cols[n * patch * area..(n + 1) * patch * area];
            im2col(&geom, sample, c);
            out.extend(matmul_nn(tk.data(), c, geom.filters, patch, area));
        }
        let out = Tensor::new(vec![geom.batch, geom.filters, geom.out_h, geom.out_w], out)?;
        self.push(out, Op::Conv2d { input, kernel, geom, cols }, &[input, kernel])
    }

    /// Non-overlapping 2×2 max pooling over the last two axes of an
    /// `N×C×H×W` tensor; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let s = tx.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::dim(format!("max_pool2 needs N×C×H×W with H,W ≥ 2, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = tx.data();
        let mut data = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], oh, ow], data)?;
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Records an operation with a caller-computed forward value and a
    /// surrogate backward rule.
    pub fn custom(&mut self, x: Var, output: Tensor, rule: Box<dyn SurrogateGrad>) -> Result<Var> {
        let input_len = self.node(x)?.value.len();
        if output.len() != input_len {
            return Err(Error::dim(format!(
                "custom op {} maps {input_len} values to {}",
                rule.name(),
                output.len()
            )));
        }
        self.push(output, Op::Custom { x, rule }, &[x])
    }

    /// Mean softmax cross-entropy of `logits[N×K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.node(logits)?.value;
        let s = tl.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "logits {s:?} against {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0f32; n * k];
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &tl.data()[i * k..(i + 1) * k];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = ((v as f64 - max).exp() / denom) as f32;
            }
            total += denom.ln() + max - row[label] as f64;
        }
        let loss = Tensor::scalar((total / n as f64) as f32);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(loss, op, &[logits])
    }

    /// Back-propagates from the scalar `loss`, populating the gradient of
    /// every node that depends on a parameter. Parameters the loss does not
    /// reach receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.recorded_ops == 0 {
            return Err(Error::State("backward called before any forward operation".into()));
        }
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(Error::State(format!(
                "loss must be scalar, got shape {:?}",
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..=loss.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if !node.requires_grad {
                continue;
            }
            let grad = match grad {
                Some(g) => g,
                None if node.param => vec![0.0; node.value.len()],
                None => continue,
            };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", node.op.name())));
            }
            node.value.set_grad(grad)?;
        }
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.index] {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let val = |v: Var| self.nodes[v.index].value.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    self.accumulate(grads, a, matmul_nt(g, val(b), m, n, k));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, matmul_tn(val(a), g, m, k, n));
                }
            }
            Op::AddBias { x, bias, channels, inner } => {
                self.accumulate(grads, x, g.to_vec());
                if self.wants(bias) {
                    let mut gb = vec![0.0f64; channels];
                    for (i, &v) in g.iter().enumerate() {
                        gb[(i / inner) % channels] += v as f64;
                    }
                    self.accumulate(grads, bias, gb.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Mul { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.iter().zip(val(b)).map(|(u, y)| u * y).collect());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.iter().zip(val(a)).map(|(u, x)| u * x).collect());
                }
            }
            Op::Scale { x, s } => {
                let factor = val(s)[0];
                if self.wants(x) {
                    self.accumulate(grads, x, g.iter().map(|u| u * factor).collect());
                }
                if self.wants(s) {
                    let ds: f64 = g.iter().zip(val(x)).map(|(&u, &v)| u as f64 * v as f64).sum();
                    self.accumulate(grads, s, vec![ds as f32]);
                }
            }
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&u, &y)| if y > 0.0 { u } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            Op::Reshape { x } => self.accumulate(grads, x, g.to_vec()),
            Op::Sum { x } => {
                let len = self.nodes[x.index].value.len();
                self.accumulate(grads, x, vec![g[0]; len]);
            }
            Op::Conv2d { input, kernel, geom, ref cols } => {
                let (patch, area) = (geom.patch_len(), geom.out_area());
                let out_len = geom.filters * area;
                if self.wants(kernel) {
                    let mut gk = vec![0.0f32; geom.filters * patch];
                    for n in 0..geom.batch {
                        let gn = &g[n * out_len..(n + 1) * out_len];
                        let cn = &cols[n * patch * area..(n + 1) * patch * area];
                        let part = matmul_nt(gn, cn, geom.filters, area, patch);
                        gk.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(grads, kernel, gk);
                }
                if self.wants(input) {
                    let sample_len = geom.in_sample_len();
                    let mut gi = vec![0.0f32; geom.batch * sample_len];
                    for n in 0..geom.batch {
                        let gn = &g[n * out_len..(n + 1) * out_len];
                        let gcols = matmul_tn(val(kernel), gn, geom.filters, patch, area);
                        col2im(&geom, &gcols, &mut gi[n * sample_len..(n + 1) * sample_len]);
                    }
                    self.accumulate(grads, input, gi);
                }
            }
            Op::MaxPool2 { x, ref argmax } => {
                let mut gx = vec![0.0f32; self.nodes[x.index].value.len()];
                for (&src, &u) in argmax.iter().zip(g) {
                    gx[src] += u;
                }
                self.accumulate(grads, x, gx);
            }
            Op::Custom { x, ref rule } => {
                if self.wants(x) {
                    let gx = rule.backward(g, val(x))?;
                    if gx.len() != g.len() {
                        return Err(Error::dim(format!("surrogate {} returned wrong length", rule.name())));
                    }
                    self.accumulate(grads, x, gx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, ref labels, ref probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f32;
                let mut gl = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    gl[i * k + label] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, logits, gl);
            }
        }
        Ok(())
    }
}
