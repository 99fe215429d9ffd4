//! Weight file format.
//!
//! ```text
//! "TFLT"            4 bytes magic
//! version           u32 LE (= 1)
//! header_len        u64 LE
//! header            header_len bytes of UTF-8 JSON:
//!                   {"config": ModelConfig, "tensors": [{"name", "shape", "offset"}]}
//! tensor data       f32 LE, each tensor at `offset` bytes from the start of this region
//! crc32             u32 LE, CRC-32 (IEEE) of every preceding byte
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::weights::{FeedForward, LayerWeights, Mlp, Model, MoeWeights};
use super::{ModelConfig, ModelError};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"TFLT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn mlp_layout(prefix: &str, d: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{prefix}.w_gate"), vec![d, hidden]));
    out.push((format!("{prefix}.w_up"), vec![d, hidden]));
    out.push((format!("{prefix}.w_down"), vec![hidden, d]));
}

/// Tensor names and shapes a config implies, in file order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        out.push((format!("{p}.attn_norm"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), vec![d, d]));
        }
        out.push((format!("{p}.mlp_norm"), vec![d]));
        match config.moe {
            Some(moe) if config.is_moe_layer(i) => {
                out.push((format!("{p}.router"), vec![d, moe.n_experts]));
                for e in 0..moe.n_experts {
                    mlp_layout(&format!("{p}.experts.{e}"), d, moe.expert_hidden, &mut out);
                }
            }
            _ => mlp_layout(&format!("{p}.mlp"), d, config.ffn_hidden, &mut out),
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![d, config.vocab_size]));
    out
}

fn push_mlp<'a>(m: &'a Mlp, out: &mut Vec<&'a [f32]>) {
    out.push(m.w_gate.data());
    out.push(m.w_up.data());
    out.push(m.w_down.data());
}

/// Tensor data in `layout` order.
fn tensor_data(model: &Model) -> Vec<&[f32]> {
    let mut out = vec![model.embed.data()];
    for l in &model.layers {
        out.push(&l.attn_norm);
        out.extend([l.wq.data(), l.wk.data(), l.wv.data(), l.wo.data()]);
        out.push(&l.mlp_norm);
        match &l.ffn {
            FeedForward::Dense(m) => push_mlp(m, &mut out),
            FeedForward::Moe(moe) => {
                out.push(moe.router.data());
                for m in &moe.experts {
                    push_mlp(m, &mut out);
                }
            }
        }
    }
    out.push(&model.final_norm);
    out.push(model.lm_head.data());
    out
}

/// Serializes `model` to bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>, ModelError> {
    model.config.validate()?;
    let names = layout(&model.config);
    let data = tensor_data(model);
    let mut tensors = Vec::with_capacity(names.len());
    let mut offset = 0u64;
    for ((name, shape), values) in names.into_iter().zip(&data) {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(ModelError::TensorShape {
                name,
                expected: shape,
                found: vec![values.len()],
            });
        }
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += 4 * numel as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })
    .map_err(|e| ModelError::Header(e.to_string()))?;

    let mut buf = Vec::with_capacity(PREAMBLE + header.len() + offset as usize + 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for values in data {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Parses a weight file image. Nothing is returned unless every check passes.
pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
    if bytes.len() < 4 {
        return Err(ModelError::Truncated("preamble".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(ModelError::Truncated("preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ModelError::Truncated("header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| ModelError::Header(e.to_string()))?;
    header.config.validate()?;

    let directory: HashMap<&str, &TensorEntry> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t))
        .collect();
    let expected = layout(&header.config);
    for (name, shape) in &expected {
        let entry = directory
            .get(name.as_str())
            .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        if &entry.shape != shape {
            return Err(ModelError::TensorShape {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
    }

    // the data region excludes the 4-byte trailer; a file missing its
    // trailer shows up as truncation of the last tensor
    let data_end = bytes.len().saturating_sub(4).max(header_end);
    let data = &bytes[header_end..data_end];
    let mut tensors: HashMap<String, Vec<f32>> = HashMap::with_capacity(expected.len());
    for (name, shape) in &expected {
        let entry = directory[name.as_str()];
        let numel: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(numel * 4)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| ModelError::Truncated(name.clone()))?;
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name.clone(), values);
    }

    let stored = u32::from_le_bytes(
        bytes[data_end..]
            .try_into()
            .map_err(|_| ModelError::Truncated("checksum".into()))?,
    );
    let computed = crc32fast::hash(&bytes[..data_end]);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }

    assemble(header.config, tensors)
}

struct TensorPool(HashMap<String, Vec<f32>>);

impl TensorPool {
    fn take(&mut self, name: &str) -> Result<Vec<f32>, ModelError> {
        self.0
            .remove(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>, ModelError> {
        Ok(Matrix::new(rows, cols, self.take(name)?)?)
    }

    fn mlp(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<Mlp, ModelError> {
        Ok(Mlp {
            w_gate: self.matrix(&format!("{prefix}.w_gate"), d, hidden)?,
            w_up: self.matrix(&format!("{prefix}.w_up"), d, hidden)?,
            w_down: self.matrix(&format!("{prefix}.w_down"), hidden, d)?,
        })
    }
}

fn assemble(config: ModelConfig, tensors: HashMap<String, Vec<f32>>) -> Result<Model, ModelError> {
    let d = config.d_model;
    let mut pool = TensorPool(tensors);
    let embed = pool.matrix("embed", config.vocab_size, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = format!("layers.{i}");
        let ffn_for = |pool: &mut TensorPool| -> Result<FeedForward, ModelError> {
            Ok(match config.moe {
                Some(moe) if config.is_moe_layer(i) => FeedForward::Moe(MoeWeights {
                    router: pool.matrix(&format!("{p}.router"), d, moe.n_experts)?,
                    experts: (0..moe.n_experts)
                        .map(|e| pool.mlp(&format!("{p}.experts.{e}"), d, moe.expert_hidden))
                        .collect::<Result<_, _>>()?,
                    top_k: moe.top_k,
                }),
                _ => FeedForward::Dense(pool.mlp(&format!("{p}.mlp"), d, config.ffn_hidden)?),
            })
        };
        layers.push(LayerWeights {
            index: i,
            attn_norm: pool.take(&format!("{p}.attn_norm"))?,
            wq: pool.matrix(&format!("{p}.wq"), d, d)?,
            wk: pool.matrix(&format!("{p}.wk"), d, d)?,
            wv: pool.matrix(&format!("{p}.wv"), d, d)?,
            wo: pool.matrix(&format!("{p}.wo"), d, d)?,
            mlp_norm: pool.take(&format!("{p}.mlp_norm"))?,
            ffn: ffn_for(&mut pool)?,
        });
    }
    let final_norm = pool.take("final_norm")?;
    let lm_head = pool.matrix("lm_head", d, config.vocab_size)?;
    Ok(Model {
        config,
        embed,
        layers,
        final_norm,
        lm_head,
    })
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    from_bytes(&std::fs::read(path)?)
}
