//! Self-describing binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "TODMCKPT"
//! version  u32       CHECKPOINT_VERSION
//! hlen     u64       length of the JSON header in bytes
//! header   hlen      UTF-8 JSON: architecture, search space, metadata and
//!                    a block table [{name, shape, offset}]
//! payload  8·N       f64 values of every block, offsets in elements
//! ```
//!
//! Weight blocks are named `param/<tensor name>`; any other block (optimizer
//! moments, for instance) is stored under its own name.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, SupernetParams};
use super::space::SearchSpace;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TODMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    architecture: Architecture,
    search_space: SearchSpace,
    metadata: serde_json::Value,
    blocks: Vec<BlockEntry>,
}

/// Supernet weights plus everything needed to resume or search.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: SupernetParams,
    pub space: SearchSpace,
    /// Additional named tensors such as optimizer moments.
    pub extra: Vec<(String, Tensor)>,
    /// Free-form training metadata (epoch, optimizer hyperparameters, ...).
    pub metadata: serde_json::Value,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let tensors = self
            .params
            .store()
            .iter()
            .map(|(_, n, t)| (format!("{PARAM_PREFIX}{n}"), t))
            .chain(self.extra.iter().map(|(n, t)| (n.clone(), t)));
        for (name, t) in tensors {
            blocks.push(BlockEntry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(t.data());
        }
        let header = Header {
            format: "todm-checkpoint".into(),
            version: CHECKPOINT_VERSION,
            architecture: self.params.arch().clone(),
            search_space: self.space.clone(),
            metadata: self.metadata.clone(),
            blocks,
        };
        let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing TODMCKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[20 + hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut store = ParamStore::new();
        let mut extra = Vec::new();
        for b in header.blocks {
            let n: usize = b.shape.iter().product();
            let data = values
                .get(b.offset..b.offset + n)
                .ok_or_else(|| bad(format!("block {} out of range", b.name)))?
                .to_vec();
            let t = Tensor::new(b.shape, data)?;
            match b.name.strip_prefix(PARAM_PREFIX) {
                Some(name) if store.id(name).is_some() => {
                    return Err(bad(format!("duplicate block {}", b.name)));
                }
                Some(name) => {
                    store.insert(name, t);
                }
                None => extra.push((b.name, t)),
            }
        }
        let params = SupernetParams::from_store(header.architecture, store)?;
        params.arch().check_space(&header.search_space)?;
        Ok(Self {
            params,
            space: header.search_space,
            extra,
            metadata: header.metadata,
        })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
