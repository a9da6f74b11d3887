//! Named parameter tensors with paired gradient buffers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix. Vectors are `(len, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            grad: vec![0.0; rows * cols],
        }
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            });
        }
        let grad = vec![0.0; values.len()];
        Ok(Tensor { rows, cols, values, grad })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// All parameters of one model, keyed by name. BTreeMap keeps every
/// iteration order deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    version: u32,
    tensors: BTreeMap<String, TensorRecord>,
}

const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    /// Uniform init on [-s, s] with s = sqrt(6 / (rows + cols)).
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let mut t = Tensor::zeros(rows, cols);
        for v in &mut t.values {
            *v = rng.random_range(-s..=s);
        }
        self.tensors.insert(name.to_string(), t);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.tensors.insert(name.to_string(), Tensor::zeros(rows, cols));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Accumulates `grad` into the named tensor's gradient buffer.
    pub fn add_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.values.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                op: "add_grad",
                detail: format!(
                    "`{name}` holds {} entries, gradient has {}",
                    t.values.len(),
                    grad.len()
                ),
            });
        }
        for (g, d) in t.grad.iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let record = StoreRecord {
            version: CHECKPOINT_VERSION,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| {
                    (
                        name.clone(),
                        TensorRecord {
                            rows: t.rows,
                            cols: t.cols,
                            values: t.values.clone(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_value(record).expect("parameter store serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<ParamStore> {
        let record: StoreRecord = serde_json::from_value(value)
            .map_err(|e| Error::Checkpoint(format!("bad parameter record: {e}")))?;
        if record.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                record.version
            )));
        }
        let mut store = ParamStore::new();
        for (name, rec) in record.tensors {
            if rec.values.len() != rec.rows * rec.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` declares {}x{} but holds {} values",
                    rec.rows,
                    rec.cols,
                    rec.values.len()
                )));
            }
            if rec.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` holds a non-finite value"
                )));
            }
            store.insert(&name, Tensor::from_values(rec.rows, rec.cols, rec.values)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json())?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        ParamStore::from_json(value)
    }
}
