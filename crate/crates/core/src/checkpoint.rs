//! JSON parameter checkpoints.
//!
//! ```json
//! {
//!   "format": "hdetach-checkpoint",
//!   "version": 1,
//!   "metadata": { "hidden": 64, "...": "..." },
//!   "tensors": [ { "name": "w_gh", "rows": 64, "cols": 64, "data": [ ... ] } ]
//! }
//! ```
//!
//! `data` is row-major. Floats are written in shortest round-trip form and
//! parsed back bit-exactly. Biases are stored as `rows × 1` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lstm::LstmParams;
use crate::numerics::{Matrix, Vector};

pub const FORMAT: &str = "hdetach-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported checkpoint format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("tensor {0:?} missing from checkpoint")]
    Missing(String),
    #[error("tensor {name:?}: header says {rows}x{cols}, payload has {len} values")]
    Payload { name: String, rows: usize, cols: usize, len: usize },
    #[error("tensor {name:?}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("tensor {name:?} holds a non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<NamedTensor>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            rows,
            cols,
            data: data.to_vec(),
        });
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) {
        self.push(name, m.rows(), m.cols(), m.as_slice());
    }

    pub fn push_vector(&mut self, name: &str, v: &Vector) {
        self.push(name, v.len(), 1, v.as_slice());
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        Ok(Matrix::from_row_major(t.rows, t.cols, t.data.clone()).expect("payload length checked on load"))
    }

    pub fn vector(&self, name: &str) -> Result<Vector> {
        let t = self.get(name)?;
        if t.cols != 1 {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: (t.rows, 1),
                found: (t.rows, t.cols),
            });
        }
        Ok(Vector::new(t.data.clone()))
    }

    pub fn add_lstm(&mut self, p: &LstmParams) {
        for id in LstmParams::tensor_ids() {
            let data = p.tensor(id);
            let rows = p.hidden();
            self.push(&LstmParams::tensor_name(id), rows, data.len() / rows.max(1), data);
        }
    }

    pub fn lstm_params(&self) -> Result<LstmParams> {
        let hidden = self.get("b_g")?.rows;
        let input = self.get("w_gx")?.cols;
        let mut p = LstmParams::zeros(hidden, input);
        for id in LstmParams::tensor_ids() {
            let name = LstmParams::tensor_name(id);
            let t = self.get(&name)?;
            let slot = p.tensor_mut(id);
            let expected = (hidden, slot.len() / hidden.max(1));
            if (t.rows, t.cols) != expected {
                return Err(CheckpointError::Shape {
                    name,
                    expected,
                    found: (t.rows, t.cols),
                });
            }
            slot.copy_from_slice(&t.data);
        }
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(CheckpointError::Format {
                format: self.format.clone(),
                version: self.version,
            });
        }
        for t in &self.tensors {
            if t.rows * t.cols != t.data.len() {
                return Err(CheckpointError::Payload {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    len: t.data.len(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        for t in &self.tensors {
            if let Some(index) = t.data.iter().position(|x| !x.is_finite()) {
                return Err(CheckpointError::NonFinite {
                    name: t.name.clone(),
                    index,
                });
            }
        }
        Ok(serde_json::to_string_pretty(self).expect("checkpoint serialization is infallible"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        ck.validate()?;
        Ok(ck)
    }
}
