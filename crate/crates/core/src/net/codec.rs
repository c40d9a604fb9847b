//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GGTM" | version: u32 | header_len: u32 | header JSON (spec + training meta)
//! | f32 tensors: per layer, weights then biases, in layer order
//! | plan flag: u8 | if 1, SHA-256 of the mask plan file (32 bytes)
//! ```
//!
//! Masks are not stored in the model file; a pruned model is loaded together
//! with its plan, and the recorded hash must match.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{LayerParams, MaskedModel, NetError, TrainingMeta};
use super::spec::ModelSpec;
use crate::mapping::{MappingError, MaskPlan};

pub const MAGIC: &[u8; 4] = b"GGTM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    Version(u32),
    #[error("model file truncated")]
    Truncated,
    #[error("{0} trailing bytes after model data")]
    Trailing(usize),
    #[error("model references mask plan {expected} but {got}")]
    PlanMismatch { expected: String, got: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    meta: TrainingMeta,
}

pub fn encode(model: &MaskedModel) -> Result<Vec<u8>, CodecError> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        meta: model.meta.clone(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &model.params {
        for v in p.weight.iter().chain(&p.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match model.plan() {
        Some(plan) => {
            out.push(1);
            out.extend_from_slice(&hex::decode(plan.content_hash()?).expect("hex digest"));
        }
        None => out.push(0),
    }
    Ok(out)
}

/// Reads the plan hash a model file refers to, if any, without decoding
/// the tensors.
pub fn plan_reference(bytes: &[u8]) -> Result<Option<String>, CodecError> {
    let (header, rest) = split_header(bytes)?;
    let geometry = header.spec.geometry().map_err(NetError::from)?;
    let tensor_bytes: usize = geometry.iter().map(|g| 4 * (g.weight_len() + g.bias_len())).sum();
    match rest.get(tensor_bytes) {
        None => Err(CodecError::Truncated),
        Some(0) => Ok(None),
        Some(_) => rest
            .get(tensor_bytes + 1..tensor_bytes + 33)
            .map(|d| Some(hex::encode(d)))
            .ok_or(CodecError::Truncated),
    }
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8]), CodecError> {
    if bytes.len() < 12 {
        return Err(CodecError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CodecError::Version(version));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = 12usize.checked_add(len).ok_or(CodecError::Truncated)?;
    let header_bytes = bytes.get(12..end).ok_or(CodecError::Truncated)?;
    Ok((serde_json::from_slice(header_bytes)?, &bytes[end..]))
}

/// Decodes a model file. `plan` must be supplied exactly when the file
/// references one.
pub fn decode(bytes: &[u8], plan: Option<Arc<MaskPlan>>) -> Result<MaskedModel, CodecError> {
    let (header, mut rest) = split_header(bytes)?;
    let geometry = header.spec.geometry().map_err(NetError::from)?;
    let mut params = Vec::with_capacity(geometry.len());
    for g in &geometry {
        let mut take = |n: usize| -> Result<Vec<f32>, CodecError> {
            let raw = rest.get(..n * 4).ok_or(CodecError::Truncated)?;
            rest = &rest[n * 4..];
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect())
        };
        let weight = take(g.weight_len())?;
        let bias = take(g.bias_len())?;
        params.push(LayerParams { weight, bias });
    }
    let (&flag, rest) = rest.split_first().ok_or(CodecError::Truncated)?;
    let reference = match flag {
        0 => None,
        _ => Some(hex::encode(rest.get(..32).ok_or(CodecError::Truncated)?)),
    };
    let consumed = if reference.is_some() { 32 } else { 0 };
    if rest.len() > consumed {
        return Err(CodecError::Trailing(rest.len() - consumed));
    }

    let mut model = MaskedModel::from_params(header.spec, params)?;
    model.meta = header.meta;
    match (reference, plan) {
        (None, None) => {}
        (Some(expected), Some(plan)) => {
            let got = plan.content_hash()?;
            if got != expected {
                return Err(CodecError::PlanMismatch {
                    expected,
                    got: format!("plan {got} was supplied"),
                });
            }
            model.attach_plan(plan)?;
        }
        (Some(expected), None) => {
            return Err(CodecError::PlanMismatch {
                expected,
                got: "no plan was supplied".into(),
            })
        }
        (None, Some(_)) => {
            return Err(CodecError::PlanMismatch {
                expected: "none".into(),
                got: "a plan was supplied".into(),
            })
        }
    }
    Ok(model)
}
