//! Named-tensor container: `SCDT` magic, u32 version, u64 header length, a
//! JSON header `{config, tensors: [{name, shape, frozen}], meta}`, then every
//! tensor as f32 little-endian in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{expected_shapes, Parameters, Tensor};
use super::ModelConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::features::{MvnMode, NormStats};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"SCDT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Generic container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: serde_json::Value,
    pub params: Parameters,
    pub frozen: Vec<String>,
    pub meta: serde_json::Value,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_owned(),
                shape: t.shape.clone(),
                frozen: self.frozen.iter().any(|f| f == n),
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.n_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |d: String| Error::format("checkpoint", d);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 16 + hlen;
        let mut params = Parameters::new();
        let mut frozen = Vec::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("truncated payload for {}", e.name)))?;
            offset += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            params.insert(e.name.clone(), Tensor { shape: e.shape.clone(), data });
            if e.frozen {
                frozen.push(e.name.clone());
            }
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            config: header.config,
            params,
            frozen,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fsio::read(path)?)
    }
}

/// What a model checkpoint carries besides tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub stage: Option<String>,
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub vocab: Option<Vocabulary>,
    #[serde(default)]
    pub mvn: MvnMode,
    #[serde(default)]
    pub norm_stats: Option<NormStats>,
    #[serde(default)]
    pub trainable: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub meta: CheckpointMeta,
}

impl ModelCheckpoint {
    pub fn to_container(&self) -> Result<Container> {
        Ok(Container {
            config: serde_json::to_value(&self.config)?,
            params: self.params.clone(),
            frozen: Vec::new(),
            meta: serde_json::to_value(&self.meta)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_container()?.encode()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Validates every expected tensor against the stored config.
    pub fn from_container(c: Container) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(c.config)?;
        config.validate()?;
        check_shapes(&config, &c.params)?;
        let meta = if c.meta.is_null() {
            CheckpointMeta::default()
        } else {
            serde_json::from_value(c.meta)?
        };
        Ok(Self {
            config,
            params: c.params,
            meta,
        })
    }
}

/// Error listing every missing or mis-shaped tensor.
pub fn check_shapes(cfg: &ModelConfig, params: &Parameters) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape) in expected_shapes(cfg) {
        if !params.contains(&name) {
            problems.push(format!("{name}: missing"));
        } else if params.get(&name).shape != shape {
            problems.push(format!(
                "{name}: expected {shape:?}, found {:?}",
                params.get(&name).shape
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(problems))
    }
}
