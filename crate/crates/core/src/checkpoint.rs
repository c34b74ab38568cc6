//! Binary checkpoint container for models and adapters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"DCOLABCK"
//! u32    format version
//! u8     kind (1 = model, 2 = adapter)
//! u32    header length, then a JSON header of that many bytes
//! f64    payload values, count given by the header
//! [u8;32] SHA-256 of every preceding byte
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so round trips are exact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

use crate::adapters::{AdaptedModel, LoraAdapter, LoraLayer, TokenEmbedding};
use crate::error::{Error, Result};
use crate::model::{Condition, ConditionTable, EpsModel, Linear, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCOLABCK";
pub const VERSION: u32 = 1;
const KIND_MODEL: u8 = 1;
const KIND_ADAPTER: u8 = 2;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(kind: u8, header: &impl Serialize, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    Ok(out)
}

/// Verified header bytes and payload values.
fn decode(bytes: &[u8], want_kind: u8) -> Result<(&[u8], Vec<f64>)> {
    let min = MAGIC.len() + 4 + 1 + 4 + 32;
    if bytes.len() < min {
        return Err(bad("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    if &body[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = body[12];
    if kind != want_kind {
        return Err(bad(format!("expected kind {want_kind}, found {kind}")));
    }
    let hlen = u32::from_le_bytes(body[13..17].try_into().expect("4 bytes")) as usize;
    let rest = &body[17..];
    if rest.len() < hlen || !(rest.len() - hlen).is_multiple_of(8) {
        return Err(bad("truncated header or payload"));
    }
    let (header, payload) = rest.split_at(hlen);
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

struct Cursor {
    values: Vec<f64>,
    pos: usize,
}

impl Cursor {
    fn take(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if self.pos + n > self.values.len() {
            return Err(bad("payload shorter than header declares"));
        }
        let data = self.values[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Tensor::new(shape.to_vec(), data).map_err(|e| bad(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(bad("payload longer than header declares"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    spec: ModelSpec,
    conditions: Vec<String>,
    frozen: bool,
    layers: Vec<(usize, usize)>,
}

pub fn model_to_bytes(model: &EpsModel) -> Result<Vec<u8>> {
    let header = ModelHeader {
        spec: model.spec().clone(),
        conditions: model.conditions().names().to_vec(),
        frozen: model.is_frozen(),
        layers: model.spec().layer_shapes(),
    };
    let mut tensors: Vec<&Tensor> = Vec::new();
    for l in model.layers() {
        tensors.push(&l.weight);
        tensors.push(&l.bias);
    }
    tensors.push(model.conditions().embeddings());
    encode(KIND_MODEL, &header, &tensors)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<EpsModel> {
    let (header, values) = decode(bytes, KIND_MODEL)?;
    let h: ModelHeader = serde_json::from_slice(header).map_err(|e| bad(e.to_string()))?;
    let mut cur = Cursor { values, pos: 0 };
    let mut layers = Vec::new();
    for &(n, m) in &h.layers {
        let weight = cur.take(&[n, m])?;
        let bias = cur.take(&[1, m])?;
        layers.push(Linear { weight, bias });
    }
    let table = cur.take(&[h.conditions.len(), crate::model::COND_DIM])?;
    cur.finish()?;
    let mut model = EpsModel::from_parts(h.spec, layers, ConditionTable::new(h.conditions, table)?)?;
    if h.frozen {
        model.freeze();
    }
    Ok(model)
}

pub fn save_model(model: &EpsModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<EpsModel> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    model_from_bytes(&bytes)
}

#[derive(Serialize, Deserialize)]
struct TokenHeader {
    name: String,
    initializer: usize,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    base_checksum: String,
    rank: usize,
    scale: f64,
    layers: Vec<(usize, usize, usize)>,
    tokens: Vec<TokenHeader>,
}

/// An adapter, its learned tokens, and the checksum of the base model it
/// was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterFile {
    pub adapter: LoraAdapter,
    pub tokens: Vec<TokenEmbedding>,
    pub base_checksum: String,
}

impl AdapterFile {
    pub fn from_model(model: &AdaptedModel) -> Self {
        AdapterFile {
            adapter: model.adapter().clone(),
            tokens: model.tokens().to_vec(),
            base_checksum: model.base().checksum(),
        }
    }

    pub fn base_matches(&self, base: &EpsModel) -> bool {
        self.base_checksum == base.checksum()
    }

    /// Attaches to `base`. A checksum mismatch is logged as a warning only.
    pub fn attach(&self, base: Arc<EpsModel>) -> Result<AdaptedModel> {
        if !self.base_matches(&base) {
            log::warn!(
                "adapter was trained against base {} but is being attached to {}",
                self.base_checksum,
                base.checksum()
            );
        }
        let mut m = AdaptedModel::attach(base, self.adapter.clone())?;
        for t in &self.tokens {
            m.push_token(t.clone())?;
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = AdapterHeader {
            base_checksum: self.base_checksum.clone(),
            rank: self.adapter.rank(),
            scale: self.adapter.scale(),
            layers: self
                .adapter
                .layers()
                .iter()
                .map(|l| (l.a.rows(), l.rank(), l.b.cols()))
                .collect(),
            tokens: self
                .tokens
                .iter()
                .map(|t| TokenHeader {
                    name: t.name.clone(),
                    initializer: t.initializer.0,
                })
                .collect(),
        };
        let token_tensors: Vec<Tensor> = self
            .tokens
            .iter()
            .map(|t| Tensor::new(vec![t.vector.len()], t.vector.clone()))
            .collect::<Result<_>>()?;
        let mut tensors: Vec<&Tensor> = Vec::new();
        for l in self.adapter.layers() {
            tensors.push(&l.a);
            tensors.push(&l.b);
        }
        tensors.extend(token_tensors.iter());
        encode(KIND_ADAPTER, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = decode(bytes, KIND_ADAPTER)?;
        let h: AdapterHeader = serde_json::from_slice(header).map_err(|e| bad(e.to_string()))?;
        let mut cur = Cursor { values, pos: 0 };
        let mut layers = Vec::new();
        for &(n, r, m) in &h.layers {
            let a = cur.take(&[n, r])?;
            let b = cur.take(&[r, m])?;
            layers.push(LoraLayer { a, b });
        }
        let mut tokens = Vec::new();
        for t in h.tokens {
            let v = cur.take(&[crate::model::COND_DIM])?;
            tokens.push(TokenEmbedding {
                name: t.name,
                vector: v.into_data(),
                initializer: Condition(t.initializer),
            });
        }
        cur.finish()?;
        Ok(AdapterFile {
            adapter: LoraAdapter::from_layers(layers, h.rank, h.scale)?,
            tokens,
            base_checksum: h.base_checksum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::from_bytes(&bytes)
    }
}
