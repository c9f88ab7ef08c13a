//! Single-file checkpoint: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then the raw little-endian tensor payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigSection, KvConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CRNETCKP";
pub const SCHEMA_VERSION: &str = "crnet-checkpoint/1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    /// Full configuration text of the run that produced the checkpoint.
    pub run_config: KvConfig,
    pub config_hash: String,
    pub episodes_done: usize,
    pub params: ModelParams<T>,
    /// Optimizer momentum buffers, kept for resuming.
    pub velocity: ModelParams<T>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: String,
    dtype: String,
    config_hash: String,
    episodes_done: usize,
    model_config: String,
    run_config: String,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ModelConfig, run_config: KvConfig, episodes_done: usize, params: ModelParams<T>) -> Self {
        let config_hash = run_config.hash();
        Self { model, run_config, config_hash, episodes_done, params, velocity: ModelParams::default() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (kind, store) in [("param", &self.params), ("velocity", &self.velocity)] {
            for (name, t) in store.iter() {
                let bytes = T::to_le_bytes_vec(t.data());
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    kind: kind.to_string(),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                    len: bytes.len(),
                });
                payload.extend_from_slice(&bytes);
            }
        }
        let header = Header {
            schema_version: SCHEMA_VERSION.to_string(),
            dtype: T::DTYPE.to_string(),
            config_hash: self.config_hash.clone(),
            episodes_done: self.episodes_done,
            model_config: self.model.to_kv().to_text(),
            run_config: self.run_config.to_text(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("unsupported schema {}", header.schema_version)));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, expected {}", header.dtype, T::DTYPE)));
        }
        let payload = &bytes[16 + hlen..];
        let mut params = ModelParams::default();
        let mut velocity = ModelParams::default();
        for e in header.tensors {
            let raw = payload.get(e.offset..e.offset + e.len).ok_or_else(|| err("truncated payload"))?;
            let data = T::from_le_bytes_slice(raw).ok_or_else(|| err("misaligned tensor data"))?;
            let t = Tensor::from_vec(&e.shape, data)?;
            match e.kind.as_str() {
                "param" => params.insert(e.name, t)?,
                "velocity" => velocity.insert(e.name, t)?,
                other => return Err(Error::Checkpoint(format!("unknown tensor kind {other}"))),
            }
        }
        let mut model = ModelConfig::default();
        KvConfig::parse(&header.model_config)?.apply(&mut [&mut model])?;
        Ok(Self {
            model,
            run_config: KvConfig::parse(&header.run_config)?,
            config_hash: header.config_hash,
            episodes_done: header.episodes_done,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
