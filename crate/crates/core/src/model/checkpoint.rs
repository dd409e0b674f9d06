//! Binary checkpoint files.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "XSRKCKPT"
//! 8       4     format version, u32 little-endian
//! 12      4     metadata length L, u32 little-endian
//! 16      L     metadata, UTF-8 JSON
//! 16+L    8*P   parameters as f64 little-endian, layout order, row-major
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! The metadata holds the model configuration, the parameter shapes, the
//! training step, the validation RankIC, a hash of the training
//! configuration and the fitted normalizer. Writes go to a temporary file
//! that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::marketdata::NormalizationState;
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"XSRKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub val_rankic: Option<f64>,
    pub config_hash: String,
    pub normalizer: Option<NormalizationState>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    shapes: Vec<Vec<usize>>,
    step: u64,
    val_rankic: Option<f64>,
    config_hash: String,
    normalizer: Option<NormalizationState>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            model: self.params.config.clone(),
            shapes: self.params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
            step: self.step,
            val_rankic: self.val_rankic,
            config_hash: self.config_hash.clone(),
            normalizer: self.normalizer.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| corrupt(e.to_string()))?;
        let json_len = u32::try_from(json.len()).map_err(|_| corrupt("metadata too large"))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.size() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&json_len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let json_len = u32_at(12) as usize;
        let json = body
            .get(16..16 + json_len)
            .ok_or_else(|| corrupt("truncated metadata"))?;
        let meta: Metadata = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
        let mut data = &body[16 + json_len..];
        let mut tensors = Vec::with_capacity(meta.shapes.len());
        for shape in meta.shapes {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(corrupt("truncated parameter data"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            tensors.push(Tensor::new(shape, values)?);
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after parameters"));
        }
        Ok(Self {
            params: ModelParams::from_tensors(&meta.model, tensors)?,
            step: meta.step,
            val_rankic: meta.val_rankic,
            config_hash: meta.config_hash,
            normalizer: meta.normalizer,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
