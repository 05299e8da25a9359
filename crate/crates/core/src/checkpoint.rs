//! LPCK checkpoint container.
//!
//! Layout:
//!
//! ```text
//! "LPCK" | header_len: u64 LE | header: UTF-8 JSON | payload
//! ```
//!
//! The header is `{"format_version":1,"config":{..},"tensors":[{"name",
//! "shape","dtype":"f32","byte_offset"}]}`. `byte_offset` is relative to the
//! start of the payload; tensors are little-endian `f32`, row-major, stored
//! back to back in header order.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{
    flat_index, AttentionWeights, BlockWeights, FfnWeights, Model, ModelConfig, SublayerKind,
};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"LPCK";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Tensor names and shapes a model with `config` must carry, in storage order.
pub fn tensor_schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
    for l in 0..config.n_blocks {
        if !config.is_removed(flat_index(l, SublayerKind::Attention)) {
            out.push((format!("blocks.{l}.attn_norm"), vec![d]));
            out.push((format!("blocks.{l}.wq"), vec![d, config.q_dim()]));
            out.push((format!("blocks.{l}.wk"), vec![d, config.kv_dim()]));
            out.push((format!("blocks.{l}.wv"), vec![d, config.kv_dim()]));
            out.push((format!("blocks.{l}.wo"), vec![config.q_dim(), d]));
        }
        if !config.is_removed(flat_index(l, SublayerKind::Ffn)) {
            out.push((format!("blocks.{l}.ffn_norm"), vec![d]));
            out.push((format!("blocks.{l}.w_gate"), vec![d, config.d_ff]));
            out.push((format!("blocks.{l}.w_up"), vec![d, config.d_ff]));
            out.push((format!("blocks.{l}.w_down"), vec![config.d_ff, d]));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    if !config.tied_head {
        out.push(("head".to_string(), vec![d, config.vocab_size]));
    }
    out
}

fn model_tensors(model: &Model) -> Vec<&[f32]> {
    let mut out: Vec<&[f32]> = vec![model.embedding().data()];
    for b in model.blocks() {
        if let Some(a) = &b.attn {
            out.extend([
                a.norm_gain.as_slice(),
                a.wq.data(),
                a.wk.data(),
                a.wv.data(),
                a.wo.data(),
            ]);
        }
        if let Some(f) = &b.ffn {
            out.extend([
                f.norm_gain.as_slice(),
                f.w_gate.data(),
                f.w_up.data(),
                f.w_down.data(),
            ]);
        }
    }
    out.push(model.final_norm());
    if let Some(h) = model.head() {
        out.push(h.data());
    }
    out
}

/// Serializes `model` into container bytes.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let schema = tensor_schema(model.config());
    let data = model_tensors(model);
    debug_assert_eq!(schema.len(), data.len());
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(schema.len());
    for ((name, shape), values) in schema.into_iter().zip(&data) {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            byte_offset: offset,
        });
        offset += 4 * values.len() as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for values in data {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses container bytes into a model.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Header("file shorter than the magic".into()).into());
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Header("missing header length".into()).into());
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let header_end = 12u64
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            CheckpointError::Header(format!(
                "header of {header_len} bytes runs past the end of the file"
            ))
        })? as usize;
    let header_bytes = &bytes[12..header_end];

    let raw: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| CheckpointError::Header(e.to_string()))?;
    header.config.validate()?;

    let payload = &bytes[header_end..];
    let expected = tensor_schema(&header.config);
    let by_name: HashMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    if by_name.len() != header.tensors.len() {
        return Err(CheckpointError::Header("duplicate tensor names".into()).into());
    }
    let expected_names: HashMap<&str, &Vec<usize>> =
        expected.iter().map(|(n, s)| (n.as_str(), s)).collect();
    for t in &header.tensors {
        match expected_names.get(t.name.as_str()) {
            None => return Err(CheckpointError::UnexpectedTensor(t.name.clone()).into()),
            Some(shape) if **shape != t.shape => {
                return Err(CheckpointError::ShapeMismatch {
                    name: t.name.clone(),
                    message: format!("expected shape {:?}, header says {:?}", shape, t.shape),
                }
                .into())
            }
            Some(_) => {}
        }
        if t.dtype != "f32" {
            return Err(CheckpointError::Dtype(t.name.clone()).into());
        }
    }
    for (name, _) in &expected {
        if !by_name.contains_key(name.as_str()) {
            return Err(CheckpointError::MissingTensor(name.clone()).into());
        }
    }

    // offsets ascending and non-overlapping, payload long enough
    let mut prev_end = 0u64;
    let mut values: HashMap<&str, Vec<f32>> = HashMap::new();
    for t in &header.tensors {
        let numel: usize = t.shape.iter().product();
        let start = t.byte_offset;
        let end = start + 4 * numel as u64;
        if start < prev_end {
            return Err(CheckpointError::Overlap {
                name: t.name.clone(),
                offset: start,
            }
            .into());
        }
        if end > payload.len() as u64 {
            return Err(CheckpointError::Truncated {
                name: t.name.clone(),
                start,
                end,
                available: payload.len() as u64,
            }
            .into());
        }
        let data = payload[start as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        values.insert(t.name.as_str(), data);
        prev_end = end;
    }

    let config = header.config;
    let mut take_vec = |name: &str| -> Vec<f32> { values.remove(name).expect("checked above") };
    let matrix = |name: &str, data: Vec<f32>| -> Result<Matrix> {
        let shape = expected_names[name];
        Matrix::from_vec(shape[0], shape[1], data)
    };

    let embedding = matrix("embed", take_vec("embed"))?;
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for l in 0..config.n_blocks {
        let attn = if config.is_removed(flat_index(l, SublayerKind::Attention)) {
            None
        } else {
            let p = |s: &str| format!("blocks.{l}.{s}");
            Some(AttentionWeights {
                norm_gain: take_vec(&p("attn_norm")),
                wq: matrix(&p("wq"), take_vec(&p("wq")))?,
                wk: matrix(&p("wk"), take_vec(&p("wk")))?,
                wv: matrix(&p("wv"), take_vec(&p("wv")))?,
                wo: matrix(&p("wo"), take_vec(&p("wo")))?,
            })
        };
        let ffn = if config.is_removed(flat_index(l, SublayerKind::Ffn)) {
            None
        } else {
            let p = |s: &str| format!("blocks.{l}.{s}");
            Some(FfnWeights {
                norm_gain: take_vec(&p("ffn_norm")),
                w_gate: matrix(&p("w_gate"), take_vec(&p("w_gate")))?,
                w_up: matrix(&p("w_up"), take_vec(&p("w_up")))?,
                w_down: matrix(&p("w_down"), take_vec(&p("w_down")))?,
            })
        };
        blocks.push(BlockWeights { attn, ffn });
    }
    let final_norm = take_vec("final_norm");
    let head = if config.tied_head {
        None
    } else {
        Some(matrix("head", take_vec("head"))?)
    };
    Model::new(config, embedding, blocks, final_norm, head)
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
