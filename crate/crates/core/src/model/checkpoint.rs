//! Checkpoint container, format version 1 (all integers little-endian):
//!
//! ```text
//! [0..8)    magic  b"MGDNCKPT"
//! [8..12)   u32    format version
//! [12..20)  u64    header length H
//! [20..20+H)       UTF-8 JSON header (CheckpointHeader)
//! then, for each entry of `header.tensors` in order, product(shape) f32 values
//! ```
//!
//! The header echoes the model config, feature schema and seed, so loading
//! rebuilds the architecture and then overwrites every tensor by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGDNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub crate_version: String,
    /// Scalar type the model was trained in.
    pub scalar: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub tensors: Vec<TensorEntry>,
}

/// Reads only the header, e.g. to find the stored scalar type before loading.
pub fn read_checkpoint_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    parse_header(bytes).map(|(h, _)| h)
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    Ok((header, hlen))
}

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            crate_version: crate::VERSION.to_string(),
            scalar: T::NAME.to_string(),
            seed: self.seed,
            config: self.config.clone(),
            schema: self.schema.clone(),
            tensors: self
                .params
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            for &v in p.value.data() {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, hlen) = parse_header(bytes)?;
        let mut model = Model::<T>::build(&header.config, &header.schema, header.seed)?;
        if header.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, architecture has {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        let mut offset = 20 + hlen;
        for entry in &header.tensors {
            let id = model
                .params
                .by_name(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
            offset += 4 * n;
            let values: Vec<T> =
                raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
            let param = model.params.get_mut(id);
            if param.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    param.value.shape()
                )));
            }
            param.value = Tensor::new(entry.shape.clone(), values)?;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
