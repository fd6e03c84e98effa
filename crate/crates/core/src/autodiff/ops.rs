//! Loss-level helpers built on [`Tape`] primitives.

use crate::error::{Error, Result};

use super::tape::{Gradients, Tape, Var};

/// A finished scalar loss with its reverse-pass gradients.
#[derive(Debug)]
pub struct LossValue {
    pub value: f64,
    pub grads: Gradients,
}

impl LossValue {
    /// Runs the reverse pass from `loss`. Fails if the value is not finite.
    pub fn backward(tape: &Tape, loss: Var, context: &str) -> Result<Self> {
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{context} loss ({value})")));
        }
        Ok(Self {
            value,
            grads: tape.backward(loss),
        })
    }
}

/// Softmax of a single row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Row-wise log-softmax of a `[rows, cols]` buffer.
pub fn log_softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Mean cross entropy of `logits: [batch, q]` against class labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    let nll = tape.nll(lp, labels)?;
    Ok(tape.mean(nll))
}

/// Per-sample cross entropy, shape `[batch]`.
pub fn cross_entropy_per_sample(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits);
    tape.nll(lp, labels)
}

/// Mean over the batch of `KL(softmax(p) || softmax(q))`. `q_logits` is read
/// as a constant: no gradient flows into it.
pub fn kl_divergence(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let (pv, qv) = (tape.value(p_logits), tape.value(q_logits));
    if pv.shape() != qv.shape() {
        return Err(Error::Length {
            op: "kl_divergence",
            left: pv.len(),
            right: qv.len(),
        });
    }
    let cols = qv.rows_cols().1;
    let reference = log_softmax_rows(qv.data(), cols);
    let per = tape.kl_to_reference(p_logits, &reference)?;
    Ok(tape.mean(per))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
