//! Straightforward `f64` reference implementations for cross-checking the
//! optimized kernels and the tape's gradients.
//!
//! Everything here is written as plain nested loops over row-major buffers,
//! with no shared code with the crate under test.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `x[rows×in] · w[in×out] + b`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64], rows: usize, inputs: usize, outputs: usize) -> Vec<f64> {
    assert_eq!(b.len(), outputs);
    let mut y = matmul(x, w, rows, inputs, outputs);
    for r in 0..rows {
        for j in 0..outputs {
            y[r * outputs + j] += b[j];
        }
    }
    y
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Cross-correlation of `N×C×H×W` input with `F×C×K×K` kernels and zero
/// padding, six nested loops.
pub fn conv2d(x: &[f64], k: &[f64], g: Conv) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    assert_eq!(x.len(), g.batch * g.channels * g.height * g.width);
    assert_eq!(k.len(), g.filters * g.channels * g.kernel * g.kernel);
    let mut out = vec![0.0; g.batch * g.filters * oh * ow];
    for n in 0..g.batch {
        for f in 0..g.filters {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                                    continue;
                                }
                                let xi = ((n * g.channels + c) * g.height + iy as usize) * g.width + ix as usize;
                                let ki = ((f * g.channels + c) * g.kernel + ky) * g.kernel + kx;
                                s += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((n * g.filters + f) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

/// Adds `b[c]` to every element of channel `c` of an `N×C×…` tensor.
pub fn add_channel_bias(x: &mut [f64], b: &[f64], batch: usize) {
    let per_sample = x.len() / batch;
    let inner = per_sample / b.len();
    for n in 0..batch {
        for (c, &bc) in b.iter().enumerate() {
            let start = n * per_sample + c * inner;
            for v in &mut x[start..start + inner] {
                *v += bc;
            }
        }
    }
}

/// 2×2 max pooling with stride 2 over `planes` planes of `h×w`; odd edges
/// are dropped.
pub fn max_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = |y: usize, x_: usize| x[(p * h + y) * w + x_];
                let m = at(2 * oy, 2 * ox)
                    .max(at(2 * oy, 2 * ox + 1))
                    .max(at(2 * oy + 1, 2 * ox))
                    .max(at(2 * oy + 1, 2 * ox + 1));
                out.push(m);
            }
        }
    }
    out
}

/// Mean softmax cross-entropy of `rows×classes` logits.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let rows = labels.len();
    assert_eq!(logits.len(), rows * classes);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / rows as f64
}

/// Central difference `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` at the listed
/// coordinates.
pub fn central_difference<F>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Outcome of comparing analytic against numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub compared: usize,
    pub within: usize,
    pub worst: f64,
}

impl Agreement {
    pub fn fraction(&self) -> f64 {
        if self.compared == 0 {
            1.0
        } else {
            self.within as f64 / self.compared as f64
        }
    }
}

/// Compares coordinates where either value exceeds `floor` in magnitude.
pub fn agreement(analytic: &[f64], numeric: &[f64], tolerance: f64, floor: f64) -> Agreement {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = Agreement { compared: 0, within: 0, worst: 0.0 };
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() <= floor && n.abs() <= floor {
            continue;
        }
        let e = relative_error(a, n);
        out.compared += 1;
        if e <= tolerance {
            out.within += 1;
        }
        out.worst = out.worst.max(e);
    }
    out
}

/// `(2^q − 1)`-level uniform quantizer on min-max scaled values, rounding
/// half away from zero.
pub fn quantize(w: &[f64], bits: u32) -> Vec<f64> {
    let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let alpha = hi - lo;
    if alpha == 0.0 {
        return w.to_vec();
    }
    let levels = ((1u64 << bits) - 1) as f64;
    w.iter()
        .map(|&v| alpha * (((v - lo) / alpha) * levels).round() / levels + lo)
        .collect()
}

/// One target layer for [`target_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefLayer {
    /// Flattens its input first.
    Dense { inputs: usize, outputs: usize, relu: bool },
    Conv { filters: usize, kernel: usize, stride: usize, padding: usize, relu: bool, pool: bool },
}

/// Logits of a sequential network on `n` samples of shape `input_shape`.
pub fn target_forward(
    layers: &[RefLayer],
    input_shape: &[usize],
    params: &[(Vec<f64>, Vec<f64>)],
    x: &[f64],
    n: usize,
) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut shape = input_shape.to_vec();
    for (layer, (w, b)) in layers.iter().zip(params) {
        match *layer {
            RefLayer::Dense { inputs, outputs, relu: r } => {
                assert_eq!(shape.iter().product::<usize>(), inputs);
                cur = dense(&cur, w, b, n, inputs, outputs);
                if r {
                    cur = relu(&cur);
                }
                shape = vec![outputs];
            }
            RefLayer::Conv { filters, kernel, stride, padding, relu: r, pool } => {
                let g = Conv {
                    batch: n,
                    channels: shape[0],
                    height: shape[1],
                    width: shape[2],
                    filters,
                    kernel,
                    stride,
                    padding,
                };
                cur = conv2d(&cur, w, g);
                add_channel_bias(&mut cur, b, n);
                if r {
                    cur = relu(&cur);
                }
                shape = vec![filters, g.out_h(), g.out_w()];
                if pool {
                    cur = max_pool2(&cur, n * filters, shape[1], shape[2]);
                    shape = vec![filters, shape[1] / 2, shape[2] / 2];
                }
            }
        }
    }
    cur
}

/// Output of one weight-generating block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockOut {
    pub w_float: Vec<f64>,
    pub gamma: f64,
}

/// Two hidden ReLU layers on the code `bits/8`, then a weight head and a
/// scalar scale head. `p` holds `[fc1.w, fc1.b, fc2.w, fc2.b, w.w, w.b,
/// g.w, g.b]` with weights laid out `[in, out]`.
pub fn hyper_block(p: &[Vec<f64>], hidden: usize, bits: u8, outputs: usize) -> BlockOut {
    let code = [bits as f64 / 8.0];
    let h1 = relu(&dense(&code, &p[0], &p[1], 1, 1, hidden));
    let h2 = relu(&dense(&h1, &p[2], &p[3], 1, hidden, hidden));
    BlockOut {
        w_float: dense(&h2, &p[4], &p[5], 1, hidden, outputs),
        gamma: dense(&h2, &p[6], &p[7], 1, hidden, 1)[0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_center_tap_is_identity() {
        let g = Conv { batch: 1, channels: 1, height: 3, width: 3, filters: 1, kernel: 3, stride: 1, padding: 1 };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        assert_eq!(conv2d(&x, &k, g), x);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let ce = cross_entropy(&[0.0; 8], &[0, 3], 4);
        assert!((ce - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn difference_of_square() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], &[0, 1], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn reference_quantizer_two_bits() {
        assert_eq!(quantize(&[-1.0, 0.0, 3.0], 1), vec![-1.0, -1.0, 3.0]);
    }
}
