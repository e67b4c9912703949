//! `VITC` checkpoints.
//!
//! ```text
//! "VITC" | version u32 LE | header_len u64 LE | JSON header | payload
//! ```
//!
//! The header holds the model config, a variant stanza and a tensor manifest
//! (name, dtype, shape, payload byte offset, optional i8 scale). The payload
//! is the raw little-endian tensor data in manifest order.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::params::ParamTree;
use super::{Model, ViTConfig};

pub const MAGIC: &[u8; 4] = b"VITC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint truncated: need {need} bytes, have {have}")]
    Truncated { need: u64, have: u64 },
    #[error("manifest describes {manifest} payload bytes but {payload} are present")]
    LengthMismatch { manifest: u64, payload: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checkpoint does not fit this model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }
}

/// Which model family a checkpoint restores to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VariantStanza {
    Float,
    Quantized,
    Pruned { rho: f64, stages: Vec<usize> },
    Multiplexed { group_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ViTConfig,
    variant: VariantStanza,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8 { values: Vec<i8>, scale: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f32(name: impl Into<String>, t: &Tensor) -> Self {
        Self { name: name.into(), shape: t.shape().to_vec(), data: TensorData::F32(t.data().to_vec()) }
    }

    fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I8 { .. } => DType::I8,
        }
    }

    fn byte_len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => 4 * v.len(),
            TensorData::I8 { values, .. } => values.len(),
        }
    }
}

/// In-memory form of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub variant: VariantStanza,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Every leaf of `tree`, as f32, in canonical order.
    pub fn push_tree<P: ParamTree<Tensor> + ?Sized>(&mut self, prefix: &str, tree: &P) {
        tree.visit(prefix, &mut |name, t| self.tensors.push(NamedTensor::f32(name, t)));
    }

    /// Bytes of tensor payload (header excluded).
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(NamedTensor::byte_len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry {
                    name: t.name.clone(),
                    dtype: t.dtype(),
                    shape: t.shape.clone(),
                    offset,
                    scale: match t.data {
                        TensorData::I8 { scale, .. } => Some(scale),
                        TensorData::F32(_) => None,
                    },
                };
                offset += t.byte_len() as u64;
                e
            })
            .collect();
        let header = Header { config: self.config.clone(), variant: self.variant.clone(), tensors };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I8 { values, .. } => out.extend(values.iter().map(|&q| q as u8)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let have = bytes.len() as u64;
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated { need: 16, have });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body_start = 16u64.checked_add(header_len).ok_or(CheckpointError::Truncated { need: u64::MAX, have })?;
        if body_start > have {
            return Err(CheckpointError::Truncated { need: body_start, have });
        }
        let header: Header = serde_json::from_slice(&bytes[16..body_start as usize])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let payload = &bytes[body_start as usize..];

        let mut expected = 0u64;
        for e in &header.tensors {
            if e.offset != expected {
                return Err(CheckpointError::Header(format!(
                    "tensor {} at offset {} but previous tensors end at {expected}",
                    e.name, e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            expected += (numel * e.dtype.size()) as u64;
            if e.dtype == DType::I8 && e.scale.is_none() {
                return Err(CheckpointError::Header(format!("i8 tensor {} has no scale", e.name)));
            }
        }
        if expected != payload.len() as u64 {
            return Err(CheckpointError::LengthMismatch { manifest: expected, payload: payload.len() as u64 });
        }

        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let start = e.offset as usize;
                let numel: usize = e.shape.iter().product();
                let raw = &payload[start..start + numel * e.dtype.size()];
                let data = match e.dtype {
                    DType::F32 => TensorData::F32(
                        raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
                    ),
                    DType::I8 => TensorData::I8 {
                        values: raw.iter().map(|&b| b as i8).collect(),
                        scale: e.scale.expect("checked above"),
                    },
                };
                NamedTensor { name: e.name, shape: e.shape, data }
            })
            .collect();
        Ok(Checkpoint { config: header.config, variant: header.variant, tensors })
    }

    /// Pops f32 tensors off the front of `self.tensors` into `tree`, checking
    /// names (under `prefix`) and shapes.
    pub fn fill_tree<P: ParamTree<Tensor> + ?Sized>(
        &self,
        cursor: &mut usize,
        prefix: &str,
        tree: &mut P,
    ) -> Result<(), CheckpointError> {
        let mut err = None;
        tree.visit_mut(prefix, &mut |name, slot| {
            if err.is_some() {
                return;
            }
            let Some(t) = self.tensors.get(*cursor) else {
                err = Some(CheckpointError::Mismatch(format!("missing tensor {name}")));
                return;
            };
            *cursor += 1;
            match (&t.data, t.name == name && t.shape == slot.shape()) {
                (TensorData::F32(v), true) => {
                    *slot = Tensor::new(t.shape.clone(), v.clone()).expect("shape checked");
                }
                (_, _) => {
                    err = Some(CheckpointError::Mismatch(format!(
                        "expected f32 {name} {:?}, found {} {:?}",
                        slot.shape(),
                        t.name,
                        t.shape
                    )))
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    float_checkpoint(model).to_bytes()
}

pub(crate) fn float_checkpoint(model: &Model) -> Checkpoint {
    let mut ck = Checkpoint { config: model.config().clone(), variant: VariantStanza::Float, tensors: Vec::new() };
    ck.push_tree("", model.params());
    ck
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let ck = Checkpoint::from_bytes(bytes)?;
    if ck.variant != VariantStanza::Float {
        return Err(CheckpointError::Mismatch(format!("expected a float checkpoint, found {:?}", ck.variant)));
    }
    model_from_checkpoint(&ck, &mut 0)
}

pub(crate) fn model_from_checkpoint(ck: &Checkpoint, cursor: &mut usize) -> Result<Model, CheckpointError> {
    let mut model = Model::new(ck.config.clone(), 0).map_err(|e| CheckpointError::Header(e.to_string()))?;
    ck.fill_tree(cursor, "", model.params_mut())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = Model::new(ViTConfig::toy_small(), 3).unwrap();
        let bytes = save_checkpoint(&m);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_checkpoint(&back), bytes);
    }

    #[test]
    fn float_payload_is_four_bytes_per_parameter() {
        let m = Model::new(ViTConfig::toy_small(), 3).unwrap();
        let ck = float_checkpoint(&m);
        assert_eq!(ck.payload_bytes(), 4 * ViTConfig::toy_small().param_count());
        let bytes = ck.to_bytes();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + header_len + ck.payload_bytes());
    }

    #[test]
    fn corruption_is_reported() {
        let m = Model::new(ViTConfig { depth: 1, ..ViTConfig::toy(super::super::ToySize::ToyTiny) }, 1).unwrap();
        let bytes = save_checkpoint(&m);
        assert!(matches!(
            load_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::LengthMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(load_checkpoint(&bad), Err(CheckpointError::Version(9))));
        assert!(matches!(load_checkpoint(&bytes[..20]), Err(CheckpointError::Truncated { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(load_checkpoint(&longer), Err(CheckpointError::LengthMismatch { .. })));
    }

    #[test]
    fn i8_tensors_round_trip() {
        let ck = Checkpoint {
            config: ViTConfig::toy_small(),
            variant: VariantStanza::Quantized,
            tensors: vec![
                NamedTensor { name: "a".into(), shape: vec![3], data: TensorData::I8 { values: vec![-127, 0, 64], scale: 0.25 } },
                NamedTensor::f32("b", &Tensor::ones(&[2])),
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert_eq!(ck.payload_bytes(), 3 + 8);
    }
}
