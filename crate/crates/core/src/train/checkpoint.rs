//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header (configs, vocabulary fingerprint, character inventory, parameter
//! names/shapes, training state), then every parameter as little-endian
//! `f32` in header order, the Adam first and second moments in the same
//! order, and a trailing SHA-256 of everything before it. All integers are
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::text::CharVocab;
use crate::train::optim::Adam;
use crate::train::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"FQACKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab_fingerprint: String,
    char_vocab: CharVocab,
    params: Vec<ParamEntry>,
    state: TrainState,
    adam_step: u64,
    adam_skipped: u64,
    adam_betas: (f64, f64),
    adam_eps: f64,
}

/// Everything needed to resume training or to predict (given the same
/// embedding file).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_fingerprint: String,
    pub char_vocab: CharVocab,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub state: TrainState,
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            char_vocab: self.char_vocab.clone(),
            params: self
                .params
                .iter()
                .map(|(name, p)| ParamEntry {
                    name: name.to_string(),
                    shape: p.tensor.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            state: self.state.clone(),
            adam_step: self.adam.step,
            adam_skipped: self.adam.skipped,
            adam_betas: (self.adam.beta1, self.adam.beta2),
            adam_eps: self.adam.eps,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            push_f32(&mut out, p.tensor.data());
        }
        for m in self.adam.m.iter().chain(&self.adam.v) {
            push_f32(&mut out, m);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 12 + 32 {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted file)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + hlen).ok_or_else(|| bad("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut pos = 20 + hlen;
        let mut read = |n: usize| -> Result<Vec<f32>> {
            let raw = body.get(pos..pos + 4 * n).ok_or_else(|| bad("data extends past end of file"))?;
            pos += 4 * n;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let mut params = ParamStore::new();
        for e in &header.params {
            let n = e.shape.iter().product();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), read(n)?)?);
            params.set_trainable(&e.name, e.trainable)?;
        }
        let sizes: Vec<usize> = header.params.iter().map(|e| e.shape.iter().product()).collect();
        let m = sizes.iter().map(|&n| read(n)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&n| read(n)).collect::<Result<Vec<_>>>()?;
        if pos != body.len() {
            return Err(bad("trailing bytes after data"));
        }
        let mut char_vocab = header.char_vocab;
        char_vocab.reindex();
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            vocab_fingerprint: header.vocab_fingerprint,
            char_vocab,
            params,
            adam: Adam {
                beta1: header.adam_betas.0,
                beta2: header.adam_betas.1,
                eps: header.adam_eps,
                step: header.adam_step,
                m,
                v,
                skipped: header.adam_skipped,
            },
            state: header.state,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Fails unless the checkpoint was trained with the given vocabulary.
    pub fn check_vocab(&self, fingerprint: &str) -> Result<()> {
        if self.vocab_fingerprint != fingerprint {
            return Err(Error::Checkpoint(
                "vocabulary hash mismatch: the embedding file differs from the one used in training".into(),
            ));
        }
        Ok(())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
