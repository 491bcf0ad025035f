//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian u64 unless noted:
//!
//! ```text
//! magic            "FFA1" (4 bytes)
//! config_len, config   canonical key = value text
//! vocab_count          then per token: len, utf-8 bytes (id order)
//! tensor_count         then per tensor:
//!     name_len, name
//!     dtype tag (1 byte: 0 = f32, 1 = f64)
//!     ndim (1 byte), dims (u64 each)
//!     raw values, little-endian
//! ```
//!
//! Tensors are the model's named parameters plus `pos_encoding`; the round
//! trip is bit-exact.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::data::{DataError, Vocabulary};
use crate::model::{FfaModel, ModelError};
use crate::tensor::{DType, Scalar, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"FFA1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint dtype is {found}, requested {requested}")]
    DtypeMismatch { found: DType, requested: DType },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Format(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| CheckpointError::Format(format!("invalid utf-8: {e}")))
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &FfaModel<T>,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_string(&mut out, &model.cfg.to_canonical_string());
    let tokens = vocab.tokens_in_id_order();
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for token in tokens {
        push_string(&mut out, token);
    }
    let mut tensors = model.named_parameters();
    tensors.push(("pos_encoding".to_string(), model.pos_encoding.clone()));
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in &tensors {
        push_string(&mut out, name);
        out.push(T::DTYPE.tag());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data().iter() {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_preamble<'a>(
    reader: &mut Reader<'a>,
) -> Result<(ModelConfig, Vocabulary), CheckpointError> {
    let magic = reader.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let cfg = ModelConfig::from_str_contents(&reader.string()?)?;
    let count = reader.u64()? as usize;
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        tokens.push(reader.string()?);
    }
    let vocab = Vocabulary::from_id_order(tokens, cfg.min_freq)?;
    Ok((cfg, vocab))
}

/// Reads just the config and vocabulary; used to pick the element type
/// before a full load.
pub fn read_header(path: &Path) -> Result<(ModelConfig, Vocabulary), CheckpointError> {
    let bytes = read_bytes(path)?;
    let mut reader = Reader {
        bytes: &bytes,
        pos: 0,
    };
    read_preamble(&mut reader)
}

pub fn load<T: Scalar>(
    path: &Path,
) -> Result<(ModelConfig, Vocabulary, FfaModel<T>), CheckpointError> {
    let bytes = read_bytes(path)?;
    let mut reader = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let (cfg, vocab) = read_preamble(&mut reader)?;
    if cfg.dtype != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            found: cfg.dtype,
            requested: T::DTYPE,
        });
    }
    let count = reader.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = reader.string()?;
        let tag = reader.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| CheckpointError::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                found: dtype,
                requested: T::DTYPE,
            });
        }
        let ndim = reader.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(reader.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = reader.take(numel * T::BYTE_WIDTH)?;
        let data: Vec<T> = raw
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::read_le)
            .collect();
        tensors.push((name, Tensor::new(data, &shape)?));
    }
    if reader.pos != bytes.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes",
            bytes.len() - reader.pos
        )));
    }
    let model = FfaModel::from_named(&cfg, &tensors)?;
    Ok((cfg, vocab, model))
}
