//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::store::ParamStore;

/// Optimizer selection. Plain gradient descent is the default; the
/// adaptive variant keeps per-parameter first and second moment
/// estimates with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adaptive {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> OptimizerKind {
        OptimizerKind::Sgd
    }
}

impl OptimizerKind {
    pub fn adaptive() -> OptimizerKind {
        OptimizerKind::Adaptive {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies updates from the gradients accumulated in a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    /// (first moment, second moment) per parameter, adaptive only.
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        Optimizer {
            kind,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    /// One update step: value -= lr * direction. All gradients are
    /// validated as finite before any parameter is touched, so a failed
    /// step leaves the store unchanged.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            if store.get(name)?.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for name in &names {
                    let t = store.get_mut(name)?;
                    for (v, &g) in t.values.iter_mut().zip(t.grad.iter()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adaptive { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.steps as i32);
                let bc2 = 1.0 - beta2.powi(self.steps as i32);
                for name in &names {
                    let t = store.get_mut(name)?;
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; t.len()], vec![0.0; t.len()]));
                    for j in 0..t.len() {
                        let g = t.grad[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        t.values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
