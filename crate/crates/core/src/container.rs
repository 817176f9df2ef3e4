//! "CGDM v1" tensor container.
//!
//! A JSON header line `{"magic":"CGDM","version":1,"tensors":[{"name":…,"shape":[…]},…]}`
//! followed by `\n` and the concatenated little-endian `f64` payloads, in header order.
//! Network weights, training sets and projection ensembles all use this layout.
//!
//! Writers also emit a `param_count` header field; readers verify it when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &str = "CGDM";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    tensors: Vec<TensorInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    param_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub info: TensorInfo,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let info = TensorInfo { name: name.into(), shape };
        if info.len() != data.len() {
            return Err(Error::dim(format!(
                "tensor {} has shape {:?} but {} values",
                info.name,
                info.shape,
                data.len()
            )));
        }
        Ok(Self { info, data })
    }

    pub fn name(&self) -> &str {
        &self.info.name
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.info.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("container has no tensor named {name:?}")))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            magic: CONTAINER_MAGIC.into(),
            version: CONTAINER_VERSION,
            tensors: self.tensors.iter().map(|t| t.info.clone()).collect(),
            param_count: Some(self.param_count()),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.param_count() * 8);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("container header line is not terminated"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(format!("container header: {e}")))?;
        if header.magic != CONTAINER_MAGIC {
            return Err(Error::format(format!("unknown container magic {:?}", header.magic)));
        }
        if header.version != CONTAINER_VERSION {
            return Err(Error::format(format!(
                "unsupported container version {}",
                header.version
            )));
        }
        let total: usize = header.tensors.iter().map(TensorInfo::len).sum();
        if let Some(declared) = header.param_count {
            if declared != total {
                return Err(Error::format(format!(
                    "header declares {declared} parameters but the tensor table sums to {total}"
                )));
            }
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != total * 8 {
            return Err(Error::format(format!(
                "payload has {} bytes, tensor table implies {}",
                payload.len(),
                total * 8
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let tensors = header
            .tensors
            .into_iter()
            .map(|info| {
                let data: Vec<f64> = values.by_ref().take(info.len()).collect();
                Tensor { info, data }
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}
