//! Numeric core: tensors, the autodiff tape, gradient checking, and
//! first-order optimizers. Everything is f64.

mod gradcheck;
mod optim;
mod store;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use store::{ParamStore, Tensor};
pub use tape::{NodeId, Tape, BCE_EPS};

use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// KL(p || q) in nats with the 0 ln 0 = 0 convention.
///
/// Any index with p > 0 and q <= 0 makes the divergence undefined and is
/// an error; negative target mass is rejected as well.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            detail: format!("lengths {} and {}", p.len(), q.len()),
        });
    }
    let mut total = 0.0;
    for (index, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi < 0.0 {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                detail: format!("negative target mass {pi} at index {index}"),
            });
        }
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::UnsupportedDivergence { index, p: pi, q: qi });
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Index of the largest value; ties go to the first.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
