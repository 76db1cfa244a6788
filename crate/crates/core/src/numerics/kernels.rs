//! Differentiable kernels with hand-derived backward passes.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Pooled standard deviations at or below this get a zero subgradient.
pub const STD_FLOOR: f64 = 1e-12;

/// Variance floor of the per-frame layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Mean softmax cross-entropy over a batch of logit rows.
///
/// Returns the loss and `(softmax - onehot) / B`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let classes = logits.cols();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes,
        });
    }
    let batch = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[label] - max);
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            g[j] = (p - if j == label { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Per-dimension mean and population standard deviation over frames.
#[derive(Debug, Clone)]
pub struct StatsPool {
    pub pooled: Tensor,
    centered: Tensor,
    std: Vec<f64>,
}

pub fn stats_pool(frames: &Tensor) -> Result<StatsPool> {
    let t = frames.rows();
    if frames.is_empty() || t == 0 {
        return Err(Error::EmptySequence);
    }
    let d = frames.cols();
    let inv_t = 1.0 / t as f64;
    let mean: Vec<f64> = frames.sum_rows().data().iter().map(|s| s / t as f64).collect();
    let mut centered = frames.clone();
    for i in 0..t {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..t {
        for (acc, v) in var.iter_mut().zip(centered.row(i)) {
            *acc += v * v;
        }
    }
    let mut pooled = Vec::with_capacity(2 * d);
    pooled.extend_from_slice(&mean);
    for v in &mut var {
        *v *= inv_t;
        pooled.push(v.sqrt());
    }
    let std = pooled[d..].to_vec();
    Ok(StatsPool {
        pooled: Tensor::vector(pooled),
        centered,
        std,
    })
}

impl StatsPool {
    /// Applies the transposed Jacobian to a gradient on the pooled vector.
    pub fn backward(&self, grad_pooled: &[f64]) -> Tensor {
        let t = self.centered.rows();
        let d = self.centered.cols();
        debug_assert_eq!(grad_pooled.len(), 2 * d);
        let inv_t = 1.0 / t as f64;
        let (g_mean, g_std) = grad_pooled.split_at(d);
        let scale: Vec<f64> = self
            .std
            .iter()
            .zip(g_std)
            .map(|(&s, &g)| if s > STD_FLOOR { g * inv_t / s } else { 0.0 })
            .collect();
        let mut out = Tensor::zeros(&[t, d]);
        for i in 0..t {
            let c = self.centered.row(i);
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = g_mean[j] * inv_t + scale[j] * c[j];
            }
        }
        out
    }
}

/// Row-wise layer normalization with gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub output: Tensor,
    normalized: Tensor,
    inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<LayerNorm> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let inv_d = 1.0 / d as f64;
    let mut normalized = x.clone();
    let mut output = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = normalized.row_mut(i);
        let mean = row.iter().sum::<f64>() * inv_d;
        let mut var = 0.0;
        for v in row.iter_mut() {
            *v -= mean;
            var += *v * *v;
        }
        let s = 1.0 / (var * inv_d + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= s;
        }
        inv_std.push(s);
        let out = output.row_mut(i);
        for j in 0..d {
            out[j] = row[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNorm {
        output,
        normalized,
        inv_std,
    })
}

impl LayerNorm {
    /// Returns `(grad_input, grad_gain, grad_bias)`.
    pub fn backward(&self, grad_out: &Tensor, gain: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (t, d) = (self.normalized.rows(), self.normalized.cols());
        let inv_d = 1.0 / d as f64;
        let mut g_gain = vec![0.0; d];
        let mut g_bias = vec![0.0; d];
        let mut g_in = Tensor::zeros(&[t, d]);
        let mut dxhat = vec![0.0; d];
        for i in 0..t {
            let go = grad_out.row(i);
            let xh = self.normalized.row(i);
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..d {
                g_gain[j] += go[j] * xh[j];
                g_bias[j] += go[j];
                dxhat[j] = go[j] * gain.data()[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xh[j];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            let s = self.inv_std[i];
            let gi = g_in.row_mut(i);
            for j in 0..d {
                gi[j] = s * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        (g_in, Tensor::vector(g_gain), Tensor::vector(g_bias))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU activation, `x · σ(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
