//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header,
//! then every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, RTrans};
use crate::autodiff::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RTRANSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    scalar: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl<T: Scalar> RTrans<T> {
    fn named_buffers(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec()))
            .collect();
        for (i, rs) in self.running.iter().enumerate() {
            out.push((format!("head{i}.bn.running_mean"), vec![rs.mean.len()], rs.mean.clone()));
            out.push((format!("head{i}.bn.running_var"), vec![rs.var.len()], rs.var.clone()));
        }
        out
    }

    /// Serializes parameters and batchnorm buffers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let buffers = self.named_buffers();
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            scalar: T::type_name().to_string(),
            config: self.config.clone(),
            tensors: buffers
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &buffers {
            for v in data {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Restores a model, rejecting a header whose config differs from `expected`.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body_start = 12 + header_len;
        if bytes.len() < body_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..body_start]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        if let Some(cfg) = expected {
            if *cfg != header.config {
                return Err(ModelError::ConfigMismatch(format!(
                    "file has {:?}, expected {:?}",
                    header.config, cfg
                )));
            }
        }
        let mut model = Self::new(header.config)?;
        let reference = model.named_buffers();
        if reference.len() != header.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, file has {}",
                reference.len(),
                header.tensors.len()
            )));
        }
        let mut cursor = body_start;
        let mut values = Vec::with_capacity(reference.len());
        for ((name, shape, _), entry) in reference.iter().zip(&header.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(bad(format!("tensor {} does not match layout", entry.name)));
            }
            let n: usize = shape.iter().product();
            let end = cursor + 8 * n;
            if bytes.len() < end {
                return Err(bad(format!("truncated data in {name}")));
            }
            let data: Vec<T> = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            cursor = end;
            values.push(data);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut values = values.into_iter();
        for t in model.params.tensors_mut().iter_mut() {
            let data = values.next().unwrap();
            *t = Tensor::new(t.shape().to_vec(), data)?;
        }
        for rs in model.running.iter_mut() {
            rs.mean = values.next().unwrap();
            rs.var = values.next().unwrap();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, expected)
    }
}
