//! Binary checkpoints.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "GAITCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    ...   tensor payload, f64 little-endian, concatenated
//! ```
//!
//! The header records the model and training configuration, seed, norm
//! scheme, optional dataset stats and frame geometry, the optimizer step
//! count, and a tensor index. Each index entry names a tensor, its kind
//! (`param`, `buffer`, `adam_m`, `adam_v`), shape and element offset into
//! the payload. Floats are stored as raw bits, so a load reproduces the
//! saved state exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::models::{Encoder, ModelConfig};
use crate::normalization::{DatasetStats, NormScheme};
use crate::pose::FrameGeometry;
use crate::training::{AdamW, NormContext, TrainConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GAITCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scheme: NormScheme,
    pub seed: u64,
    pub stats: Option<DatasetStats>,
    pub geometry: Option<FrameGeometry>,
    /// AdamW step count; absent when no optimizer state is stored.
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to evaluate or resume it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub train: TrainConfig,
    pub norm: NormContext,
    /// Seed the encoder was initialized from.
    pub seed: u64,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.encoder.store();
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: &str, kind, shape: &[usize], data: &[f64]| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: shape.to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        for p in store.params() {
            push(&p.name, TensorKind::Param, p.value.shape(), p.value.data());
        }
        for (name, t) in store.buffers() {
            push(name, TensorKind::Buffer, t.shape(), t.data());
        }
        if let Some(opt) = &self.optimizer {
            for ((p, m), v) in store.params().iter().zip(&opt.m).zip(&opt.v) {
                push(&p.name, TensorKind::AdamM, p.value.shape(), m);
                push(&p.name, TensorKind::AdamV, p.value.shape(), v);
            }
        }
        let header = Header {
            model: self.encoder.config(),
            train: self.train.clone(),
            scheme: self.norm.scheme.clone(),
            seed: self.seed,
            stats: self.norm.stats.clone(),
            geometry: self.norm.geometry,
            optimizer_step: self.optimizer.as_ref().map(|o| o.t),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let slice = |e: &TensorEntry| -> Result<&[f64]> {
            let n: usize = e.shape.iter().product();
            payload
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))
        };

        let mut encoder = Encoder::new(&header.model, header.seed)?;
        let store = encoder.store_mut();
        let n_params = store.len();
        let mut seen = vec![false; n_params];
        let mut m = vec![Vec::new(); n_params];
        let mut v = vec![Vec::new(); n_params];
        for e in &header.tensors {
            let data = slice(e)?;
            match e.kind {
                TensorKind::Buffer => {
                    let (_, t) = store
                        .buffers_mut()
                        .find(|(n, _)| *n == e.name)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown buffer `{}`", e.name)))?;
                    if t.shape() != e.shape.as_slice() {
                        return Err(Error::Checkpoint(format!("shape mismatch for buffer `{}`", e.name)));
                    }
                    t.data_mut().copy_from_slice(data);
                }
                kind => {
                    let id = store.id(&e.name).map_err(|_| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
                    let p = store.get_mut(id);
                    if p.value.shape() != e.shape.as_slice() {
                        return Err(Error::Checkpoint(format!("shape mismatch for `{}`", e.name)));
                    }
                    match kind {
                        TensorKind::Param => {
                            p.value.data_mut().copy_from_slice(data);
                            seen[id.index()] = true;
                        }
                        TensorKind::AdamM => m[id.index()] = data.to_vec(),
                        _ => v[id.index()] = data.to_vec(),
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", store.params()[i].name)));
        }
        let optimizer = match header.optimizer_step {
            None => None,
            Some(t) => {
                if m.iter().chain(&v).any(Vec::is_empty) {
                    return Err(bad("optimizer state is incomplete"));
                }
                let mut opt = AdamW::from_config(store, &header.train);
                opt.t = t;
                opt.m = m;
                opt.v = v;
                Some(opt)
            }
        };
        Ok(Self {
            encoder,
            train: header.train,
            norm: NormContext {
                scheme: header.scheme,
                stats: header.stats,
                geometry: header.geometry,
            },
            seed: header.seed,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads only the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    Ok(serde_json::from_slice(json)?)
}
