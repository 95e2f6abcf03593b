//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor's little-endian payload back to back. The header
//! lists each tensor's name, shape, dtype and byte offset into the payload,
//! and carries the model configuration plus any caller metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::separator::{Separator, SeparatorConfig};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"DSNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Init>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub config: SeparatorConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Everything a checkpoint holds, with tensors in one precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: SeparatorConfig,
    /// Named tensors in file order; model parameters and any extra state.
    pub tensors: ParamStore<T>,
    pub inits: Vec<(String, Init)>,
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Separator<T>) -> Self {
        Self {
            config: model.config.clone(),
            tensors: model.params.clone(),
            inits: model.inits.clone(),
            metadata: serde_json::Value::Null,
        }
    }

    /// The model, ignoring tensors the configuration does not define.
    pub fn into_model(self) -> Result<Separator<T>> {
        let template = Separator::<T>::new(self.config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, _) in template.params.iter() {
            let t = self
                .tensors
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("parameter `{name}` missing")))?;
            params.insert(name, t.clone());
        }
        let inits = if self.inits.is_empty() { template.inits } else { self.inits };
        Separator::from_parts(self.config, params, inits)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE,
                offset: payload.len(),
                init: self.inits.iter().find(|(n, _)| n == name).map(|(_, i)| *i),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a container; tensors stored in another precision are cast.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = ParamStore::new();
        let mut inits = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let size = e.dtype.size();
            let raw = payload
                .get(e.offset..e.offset + n * size)
                .ok_or_else(|| Error::Checkpoint(format!("payload of `{}` out of bounds", e.name)))?;
            let data: Vec<T> = match e.dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| T::cast(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| T::cast(f64::read_le(c))).collect(),
            };
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            if let Some(i) = e.init {
                inits.push((e.name.clone(), i));
            }
        }
        Ok(Self {
            config: header.config,
            tensors,
            inits,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
