//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version (u32 LE), metadata length (u64 LE), JSON
//! metadata, parameters as row-major f32 LE in manifest order, optional
//! optimizer moments (all first moments, then all second moments), and a
//! SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamWState;
use super::{TrainConfig, TrainError};
use crate::model::{EncoderConfig, Model, ParamSpec};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"QLABCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    /// Completed optimizer steps.
    pub step: usize,
    pub config: TrainConfig,
    pub data_seed: u64,
    /// Word position of the batch stream, as a decimal string.
    pub data_position: String,
    pub dropout_seed: u64,
    pub dropout_position: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub params: Vec<ParamSpec>,
    pub resume: Option<ResumeState>,
    pub has_moments: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub resume: Option<ResumeState>,
    pub moments: Option<AdamWState>,
}

fn push_f32(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let meta = CheckpointMeta {
            encoder: self.model.config().clone(),
            params: self.model.specs().to_vec(),
            resume: self.resume.clone(),
            has_moments: self.moments.is_some(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            push_f32(&mut out, p.data());
        }
        if let Some(st) = &self.moments {
            for buf in st.m.iter().chain(&st.v) {
                push_f32(&mut out, buf);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&body[20..meta_end])?;
        let mut rest = &body[meta_end..];
        let mut take = |n: usize| -> Result<Vec<f32>, TrainError> {
            if rest.len() < n * 4 {
                return Err(bad("truncated tensor data"));
            }
            let (head, tail) = rest.split_at(n * 4);
            rest = tail;
            Ok(head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut named = Vec::with_capacity(meta.params.len());
        for spec in &meta.params {
            let n = spec.shape.iter().product();
            let t = Tensor::new(spec.shape.clone(), take(n)?)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            named.push((spec.name.clone(), t));
        }
        let moments = if meta.has_moments {
            let sizes: Vec<usize> = meta.params.iter().map(|s| s.shape.iter().product()).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
            Some(AdamWState { m, v })
        } else {
            None
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let model = Model::from_params(meta.encoder, named)?;
        Ok(Self {
            model,
            resume: meta.resume,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TrainError::Checkpoint(m) => TrainError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn ckpt() -> Checkpoint {
        let cfg = EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 8,
            ..EncoderConfig::default()
        };
        let model = Model::init(cfg, &mut RngStream::new(1)).unwrap();
        let moments = Some(AdamWState::new(model.params()));
        Checkpoint {
            model,
            resume: None,
            moments,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.model.config(), c.model.config());
        assert_eq!(back.moments, c.moments);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut b = ckpt().to_bytes().unwrap();
        let n = b.len();
        b[n - 40] ^= 1;
        let err = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut b = ckpt().to_bytes().unwrap();
        b[8] = 99;
        let err = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn garbage_rejected() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
    }
}
