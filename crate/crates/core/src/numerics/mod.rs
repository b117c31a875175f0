//! Dense tensors, the differentiable primitives the model is assembled from,
//! and a finite-difference gradient checker.

mod attention;
mod gradcheck;
mod graph;
mod tensor;

pub use attention::{multi_head_attention, scaled_dot_product_attention, AttentionWeights, Dense, KeySource};
pub use gradcheck::{check_gradients, Differentiable, FnContract, GradientCheck, GradientReport, GraphContract, TensorError};
pub use graph::{Gradients, Graph, Var, MASK_LOGIT};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Inputs above this use `x + ln(1 + e^-x)`; `e^-20` is below the ulp of the correction.
pub const SOFTPLUS_THRESHOLD: f64 = 20.0;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_THRESHOLD {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(v_i)` stabilized by subtracting the maximum.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    let max = v
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let total: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + total.ln())
}

/// Softmax of a vector; the gradient of [`logsumexp`].
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(v)?;
    Ok(v.iter().map(|x| (x - lse).exp()).collect())
}

/// Row-wise softmax of `logits + bias` with masked keys forced to zero weight.
///
/// `logits` and `bias` share a `[.., q, k]` shape and `key_mask` has one entry
/// per key column.
pub fn masked_softmax_with_bias(logits: &Tensor, bias: &Tensor, key_mask: &[bool]) -> Result<Tensor> {
    let mut g = Graph::new();
    let l = g.frozen(logits);
    let b = g.frozen(bias);
    let z = g.add(l, b)?;
    let p = g.masked_softmax(z, Some(key_mask))?;
    Ok(g.value(p).clone())
}

/// Transformer sinusoidal embedding of frame index `t`: entries `2j` and
/// `2j + 1` hold `sin(t / 10000^(2j/dim))` and `cos(t / 10000^(2j/dim))`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal embedding needs an even dimension, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let freq = 10_000f64.powf(-((2 * j) as f64) / dim as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}
