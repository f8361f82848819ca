//! Binary checkpoint: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header describing the run and every tensor, then the tensor data as
//! little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Method, TrainConfig};
use crate::autodiff::Tensor;
use crate::models::{Auem, AuemConfig, ModelError, ParamStore, SegBackboneConfig, SegNet};

const MAGIC: &[u8; 8] = b"UMACKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file")]
    Magic { path: String },
    #[error("{path}: malformed header: {detail}")]
    Header { path: String, detail: String },
    #[error("{path}: tensor data ends early ({expected} values expected)")]
    Truncated { path: String, expected: usize },
    #[error("{path}: {source}")]
    Model { path: String, source: ModelError },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub config: TrainConfig,
    pub num_sources: usize,
    /// Extents of the training images.
    pub height: usize,
    pub width: usize,
    pub epochs_completed: usize,
    pub seg: SegNet,
    pub auem: Option<Auem>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    method: Method,
    config: TrainConfig,
    num_sources: usize,
    height: usize,
    width: usize,
    epochs_completed: usize,
    seg: SegBackboneConfig,
    auem: Option<AuemConfig>,
    tensors: Vec<TensorEntry>,
}

const SEG: &str = "seg";
const AUEM: &str = "auem";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut groups: Vec<(&str, &ParamStore)> = vec![(SEG, self.seg.params())];
        if let Some(a) = &self.auem {
            groups.push((AUEM, a.params()));
        }
        let header = Header {
            method: self.method,
            config: self.config,
            num_sources: self.num_sources,
            height: self.height,
            width: self.width,
            epochs_completed: self.epochs_completed,
            seg: *self.seg.config(),
            auem: self.auem.as_ref().map(|a| *a.config()),
            tensors: groups
                .iter()
                .flat_map(|(g, store)| {
                    store.iter().map(move |(name, t)| TensorEntry {
                        group: g.to_string(),
                        name: name.to_string(),
                        shape: t.shape().to_vec(),
                    })
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, store) in &groups {
            for (_, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, CheckpointError> {
        let header_err = |detail: String| CheckpointError::Header {
            path: path.to_string(),
            detail,
        };
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        if cursor.read_exact(&mut magic).is_err() || &magic != MAGIC {
            return Err(CheckpointError::Magic {
                path: path.to_string(),
            });
        }
        let mut len = [0u8; 8];
        cursor
            .read_exact(&mut len)
            .map_err(|_| header_err("missing header length".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > cursor.len() {
            return Err(header_err(format!("header length {len} exceeds file")));
        }
        let (json, mut data) = cursor.split_at(len);
        let header: Header = serde_json::from_slice(json).map_err(|e| header_err(e.to_string()))?;

        let mut seg = ParamStore::new();
        let mut auem = ParamStore::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 8 {
                return Err(CheckpointError::Truncated {
                    path: path.to_string(),
                    expected: n,
                });
            }
            let (chunk, rest) = data.split_at(n * 8);
            data = rest;
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape.clone(), values)
                .map_err(|e| header_err(format!("{}: {e}", entry.name)))?;
            let store = match entry.group.as_str() {
                SEG => &mut seg,
                AUEM => &mut auem,
                other => return Err(header_err(format!("unknown tensor group {other:?}"))),
            };
            store
                .insert(entry.name.clone(), t)
                .map_err(|source| CheckpointError::Model {
                    path: path.to_string(),
                    source,
                })?;
        }
        if !data.is_empty() {
            return Err(header_err(format!("{} trailing bytes", data.len())));
        }
        let model_err = |source| CheckpointError::Model {
            path: path.to_string(),
            source,
        };
        let seg = SegNet::from_params(header.seg, seg).map_err(model_err)?;
        let auem = match header.auem {
            Some(cfg) => Some(Auem::from_params(cfg, auem).map_err(model_err)?),
            None => None,
        };
        Ok(Checkpoint {
            method: header.method,
            config: header.config,
            num_sources: header.num_sources,
            height: header.height,
            width: header.width,
            epochs_completed: header.epochs_completed,
            seg,
            auem,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
