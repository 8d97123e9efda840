//! `AWCK` checkpoint format.
//!
//! ```text
//! "AWCK" | version u32 (= 1) | header length u32 | header (UTF-8 JSON)
//!        | tensor values as little-endian f64, tensors in header order
//! ```
//!
//! The JSON header records the model kind, the architecture and the name and
//! shape of every tensor, so a file can be checked before any values are read.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, Mlp, ParamStore};
use crate::codec::{checked_product, Reader, Writer};
use crate::error::FormatError;
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"AWCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Encoder,
    Head,
    Probe,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(kind: ModelKind, model: &Mlp) -> Vec<u8> {
    let header = Header {
        kind,
        arch: model.arch.clone(),
        tensors: model
            .params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut w = Writer::new(MAGIC, VERSION);
    w.bytes(serde_json::to_string(&header).expect("header serializes").as_bytes());
    for t in model.params.tensors() {
        w.f64s(t.data());
    }
    w.finish()
}

pub fn decode(buf: &[u8]) -> Result<(ModelKind, Mlp), FormatError> {
    let mut r = Reader::open(buf, MAGIC, VERSION)?;
    let text = std::str::from_utf8(r.bytes()?)
        .map_err(|e| FormatError::Invalid(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text)
        .map_err(|e| FormatError::Invalid(format!("header: {e}")))?;
    header
        .arch
        .validate()
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    let mut params = ParamStore::new();
    for entry in header.tensors {
        let n = checked_product(&entry.shape)?;
        let data = r.f64s(n)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Invalid(format!(
                "tensor {} holds non-finite values",
                entry.name
            )));
        }
        let t = Tensor::new(entry.shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
        params
            .insert(entry.name, t)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
    }
    r.finish()?;
    let mlp = Mlp::from_parts(header.arch, params).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok((header.kind, mlp))
}

/// Hex SHA-256 of the encoded checkpoint.
pub fn fingerprint(kind: ModelKind, model: &Mlp) -> String {
    hex::encode(Sha256::digest(encode(kind, model)))
}
