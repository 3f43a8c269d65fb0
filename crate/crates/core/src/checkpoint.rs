//! Single-file model container.
//!
//! Layout: the magic `VGCMCKPT`, a little-endian `u64` header length, a JSON
//! header (configs, vocabulary, dtype, parameter names and shapes), then each
//! parameter's values in header order as little-endian scalars.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::Vocabulary;
use crate::autodiff::ParamStore;
use crate::causal::CausalConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Vgcm};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"VGCMCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    causal: CausalConfig,
    vocabulary: Vec<String>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// A trained model together with the vocabulary it was trained against.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Vgcm<T>,
    pub vocab: Vocabulary,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Vgcm<T>, vocab: Vocabulary) -> Self {
        Self { model, vocab }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let header = Header {
            version: VERSION,
            dtype: T::DTYPE.to_owned(),
            model: self.model.config.clone(),
            causal: self.model.causal,
            vocabulary: self.vocab.words().to_vec(),
            params: params
                .iter()
                .map(|(_, name, m)| ParamEntry { name: name.to_owned(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + params.num_scalars() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, m) in params.iter() {
            for &x in m.as_slice() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Magic(origin.to_owned()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(Error::Truncated { expected: header_len, found: body.len() });
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        if header.version != VERSION {
            return Err(Error::Schema(format!("{origin}: unsupported checkpoint version {}", header.version)));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::Schema(format!("{origin}: stored dtype {}, requested {}", header.dtype, T::DTYPE)));
        }
        let data = &body[header_len..];
        let expected: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
        if data.len() != expected * T::BYTES {
            return Err(Error::Truncated { expected, found: data.len() / T::BYTES });
        }
        let mut store = ParamStore::new();
        let mut chunks = data.chunks_exact(T::BYTES);
        for p in header.params {
            let values = chunks.by_ref().take(p.rows * p.cols).map(T::read_le).collect();
            store.insert(p.name, Matrix::from_vec(p.rows, p.cols, values));
        }
        let model = Vgcm::from_params(header.model, header.causal, store)?;
        Ok(Self { model, vocab: Vocabulary::from_words(header.vocabulary) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
