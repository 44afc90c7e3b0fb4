//! Scalar loss primitives and composite layers built from tape operations.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(z,0) − z·y + ln(1 + e^{−|z|})`, finite for any finite logit.
pub fn bce_with_logits(logit: f64, target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(TensorError::Domain {
            op: "bce_with_logits",
            value: target,
            domain: "[0, 1]",
        });
    }
    Ok(logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p())
}

pub fn bce_with_logits_grad(logit: f64, target: f64) -> f64 {
    sigmoid(logit) - target
}

pub fn smooth_l1(pred: f64, target: f64) -> f64 {
    let d = pred - target;
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

pub fn smooth_l1_grad(pred: f64, target: f64) -> f64 {
    let d = pred - target;
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Projection weights of a single-head self-attention block, all `[D×D]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic `[T×T]` attention matrix.
    pub weights: Var,
}

/// Scaled dot-product self-attention over `x [T×D]` with an output
/// projection and a residual connection:
/// `softmax(x Wq (x Wk)ᵀ / √D) · x Wv · Wo + x`.
pub fn self_attention(tape: &mut Tape, x: Var, w: AttentionWeights) -> Result<AttentionOutput> {
    let (_, d) = tape.value(x).dims2("self_attention")?;
    let q = tape.matmul(x, w.query)?;
    let k = tape.matmul(x, w.key)?;
    let v = tape.matmul(x, w.value)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let mixed = tape.matmul(weights, v)?;
    let projected = tape.matmul(mixed, w.output)?;
    let output = tape.add(projected, x)?;
    Ok(AttentionOutput { output, weights })
}
