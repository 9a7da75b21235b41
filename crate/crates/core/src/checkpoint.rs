//! Binary checkpoints: `SENVAECK`, a little-endian `u32` version, a
//! length-prefixed JSON header, then every parameter as raw little-endian
//! `f64` in header order. Values round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, PriorSpec, SenVae};
use crate::objectives::Controller;
use crate::pipeline::Vocabulary;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SENVAECK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_size: usize,
    prior: PriorSpec,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

/// Training position stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub controller: Option<Controller>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SenVae,
    pub vocab: Vocabulary,
    pub meta: CheckpointMeta,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        if self.vocab.len() != m.vocab_size {
            return Err(bad(format!(
                "vocabulary has {} entries, model expects {}",
                self.vocab.len(),
                m.vocab_size
            )));
        }
        let header = Header {
            config: m.config.clone(),
            vocab_size: m.vocab_size,
            prior: m.prior.clone(),
            vocabulary: self.vocab.entries().to_vec(),
            tensors: m
                .params
                .iter()
                .map(|(_, name, t)| TensorEntry { name: name.to_owned(), shape: t.shape().to_vec() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + json.len() + 8 * m.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in m.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let vocab = Vocabulary::from_tokens(header.vocabulary)?;
        if vocab.len() != header.vocab_size {
            return Err(bad("vocabulary size disagrees with header"));
        }
        let mut model = SenVae::new(&header.config, header.vocab_size, header.prior, None, 0)?;
        if model.params.len() != header.tensors.len() {
            return Err(bad(format!(
                "{} tensors stored, model layout has {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        for entry in &header.tensors {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| bad(format!("unknown tensor {:?}", entry.name)))?;
            if model.params.get(id).shape() != entry.shape.as_slice() {
                return Err(bad(format!("tensor {:?} has shape {:?}", entry.name, entry.shape)));
            }
            let n: usize = entry.shape.iter().product();
            if r.len() < 8 * n {
                return Err(bad(format!("truncated data for {:?}", entry.name)));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *model.params.get_mut(id) = Tensor::new(entry.shape.clone(), data)?;
            r = &r[8 * n..];
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { model, vocab, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Error unless `vocab` is the vocabulary the model was trained with.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if *vocab != self.vocab {
            return Err(Error::Data(format!(
                "vocabulary mismatch: checkpoint has {} entries, corpus vocabulary {}",
                self.vocab.len(),
                vocab.len()
            )));
        }
        Ok(())
    }
}
