//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SONLLM1" | version u32
//! config: u64 byte length + UTF-8 TOML
//! vocab:  u32 count, then per token u32 byte length + UTF-8
//! arrays: u32 count, then per array
//!         u32 name length + UTF-8 name | u32 ndim | ndim × u64 dims | f64 data
//! ```
//!
//! The vocabulary stores corpus tokens only; the reserved ids are implied.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, FrozenCodec, SentenceCodec};
use crate::concept::ConceptModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::training::{Model, Objective};

pub const MAGIC: &[u8; 7] = b"SONLLM1";
pub const VERSION: u32 = 1;

const CODEC_PREFIX: &str = "codec.";
const MODEL_PREFIX: &str = "model.";

/// Architecture description stored as the checkpoint's config text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub sentinel: String,
    pub codec: CodecConfig,
    pub objective: Option<Objective>,
    pub model: Option<ConceptModelConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub vocab: Vec<String>,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_codec(codec: &FrozenCodec) -> Result<Self> {
        Self::build(codec, None)
    }

    pub fn from_model(codec: &FrozenCodec, objective: Objective, model: &Model) -> Result<Self> {
        Self::build(codec, Some((objective, model)))
    }

    fn build(codec: &FrozenCodec, model: Option<(Objective, &Model)>) -> Result<Self> {
        let meta = CheckpointMeta {
            sentinel: codec.sentinel().to_string(),
            codec: codec.config().clone(),
            objective: model.map(|m| m.0),
            model: model.map(|m| m.1.config().clone()),
        };
        let mut arrays = codec.params().export(CODEC_PREFIX);
        if let Some((_, m)) = model {
            arrays.extend(m.params().export(MODEL_PREFIX));
        }
        Ok(Self {
            config_text: toml::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?,
            vocab: codec.vocab().corpus_tokens().to_vec(),
            arrays,
        })
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        toml::from_str(&self.config_text).map_err(|e| Error::Format(format!("embedded config: {e}")))
    }

    /// Rebuilds the frozen codec, recomputing the sentinel embedding.
    pub fn codec(&self) -> Result<FrozenCodec> {
        let meta = self.meta()?;
        let mut codec = SentenceCodec::new(meta.codec, 0)?;
        codec.params_mut().import(CODEC_PREFIX, &self.arrays)?;
        let vocab = Vocabulary::from_tokens(self.vocab.iter().cloned())?;
        codec.freeze(vocab, &meta.sentinel)
    }

    /// The trained model, when the checkpoint holds one.
    pub fn model(&self) -> Result<Option<(Objective, Model)>> {
        let meta = self.meta()?;
        match (meta.objective, meta.model) {
            (Some(objective), Some(config)) => {
                let mut model = Model::new(objective, config, 0)?;
                model.params_mut().import(MODEL_PREFIX, &self.arrays)?;
                Ok(Some((objective, model)))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Format("objective and model config must appear together".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in &self.vocab {
            put_str(&mut out, t);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let len = r.u64("config length")? as usize;
        let config_text = r.string(len, "config")?;
        let n_vocab = r.u32("vocabulary size")?;
        let mut vocab = Vec::new();
        for _ in 0..n_vocab {
            let len = r.u32("token length")? as usize;
            vocab.push(r.string(len, "token")?);
        }
        let n_arrays = r.u32("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..n_arrays {
            let len = r.u32("array name length")? as usize;
            let name = r.string(len, "array name")?;
            let ndim = r.u32("array rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("array dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("array `{name}` runs past end of file")))?;
            let raw = r.take(numel * 8, "array data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("array `{name}`: {e}")))?;
            arrays.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config_text,
            vocab,
            arrays,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}
