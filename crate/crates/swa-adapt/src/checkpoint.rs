//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    magic "SWAD"
//! bytes 4..8    format version (u32, currently 1)
//! bytes 8..16   header length H (u64)
//! bytes 16..16+H  header JSON (model config, dtype, adapter metadata,
//!                 array index with offsets into the payload)
//! bytes 16+H..  payload: named arrays, row-major, little-endian floats
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LoraAdapters, LoraLayer, LoraPair, ModelConfig, ToyTransformer, Weights};
use crate::tensor::{Dtype, Scalar, Tensor2D};

const MAGIC: &[u8; 4] = b"SWAD";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    rank: usize,
    alpha: f64,
    enabled: bool,
    active_layers: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: Dtype,
    adapters: Option<AdapterMeta>,
    arrays: Vec<ArrayEntry>,
}

fn push_array<T: Scalar>(
    name: &str,
    t: &Tensor2D<T>,
    arrays: &mut Vec<ArrayEntry>,
    payload: &mut Vec<u8>,
) {
    arrays.push(ArrayEntry {
        name: name.to_string(),
        rows: t.rows(),
        cols: t.cols(),
        offset: payload.len() as u64,
    });
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                payload.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
}

/// Serialize a model to the container format.
pub fn to_bytes<T: Scalar>(model: &ToyTransformer<T>) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();

    let names = Weights::<T>::block_names(model.config.num_layers);
    for (name, block) in names.iter().zip(model.weights.blocks()) {
        push_array(name, block, &mut arrays, &mut payload);
    }
    let adapters_meta = model.adapters.as_ref().map(|a| {
        for (name, block) in a.block_names().iter().zip(a.blocks()) {
            push_array(name, block, &mut arrays, &mut payload);
        }
        AdapterMeta {
            rank: a.rank,
            alpha: a.alpha,
            enabled: a.enabled,
            active_layers: a
                .layers
                .iter()
                .enumerate()
                .filter_map(|(i, l)| l.is_some().then_some(i))
                .collect(),
        }
    });

    let header = Header {
        config: model.config.clone(),
        dtype: T::DTYPE,
        adapters: adapters_meta,
        arrays,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out
}

fn read_array<T: Scalar>(entry: &ArrayEntry, dtype: Dtype, payload: &[u8]) -> Result<Tensor2D<T>> {
    let count = entry.rows * entry.cols;
    let start = entry.offset as usize;
    let end = start + count * dtype.bytes();
    if end > payload.len() {
        return Err(Error::Checkpoint(format!("array {} overruns payload", entry.name)));
    }
    let bytes = &payload[start..end];
    let mut data = Vec::with_capacity(count);
    match dtype {
        Dtype::F32 => {
            for chunk in bytes.chunks_exact(4) {
                data.push(T::of_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
            }
        }
        Dtype::F64 => {
            for chunk in bytes.chunks_exact(8) {
                data.push(T::of_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
    }
    Tensor2D::from_vec(entry.rows, entry.cols, data)
}

/// Deserialize a model. The stored dtype must match `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ToyTransformer<T>> {
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "stored dtype {:?} does not match requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    header.config.validate()?;
    let payload = &bytes[16 + header_len..];

    let mut find = |name: &str| -> Result<Tensor2D<T>> {
        let entry = header
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
        read_array(entry, header.dtype, payload)
    };

    let mut layers = Vec::with_capacity(header.config.num_layers);
    let embed = find("embed")?;
    for l in 0..header.config.num_layers {
        layers.push(crate::model::LayerWeights {
            attn_norm: find(&format!("layer{l}.attn_norm"))?,
            wq: find(&format!("layer{l}.wq"))?,
            wk: find(&format!("layer{l}.wk"))?,
            wv: find(&format!("layer{l}.wv"))?,
            wo: find(&format!("layer{l}.wo"))?,
            mlp_norm: find(&format!("layer{l}.mlp_norm"))?,
            w_up: find(&format!("layer{l}.w_up"))?,
            w_down: find(&format!("layer{l}.w_down"))?,
        });
    }
    let weights = Weights {
        embed,
        layers,
        final_norm: find("final_norm")?,
        unembed: find("unembed")?,
    };

    let adapters = match &header.adapters {
        None => None,
        Some(meta) => {
            let active: BTreeSet<usize> = meta.active_layers.iter().copied().collect();
            let mut layers = Vec::with_capacity(header.config.num_layers);
            for l in 0..header.config.num_layers {
                if active.contains(&l) {
                    let mut pair = |t: &str| -> Result<LoraPair<T>> {
                        Ok(LoraPair {
                            a: find(&format!("layer{l}.lora_{t}.a"))?,
                            b: find(&format!("layer{l}.lora_{t}.b"))?,
                        })
                    };
                    layers.push(Some(LoraLayer { q: pair("q")?, k: pair("k")?, v: pair("v")? }));
                } else {
                    layers.push(None);
                }
            }
            Some(LoraAdapters {
                rank: meta.rank,
                alpha: meta.alpha,
                enabled: meta.enabled,
                layers,
            })
        }
    };

    let model = ToyTransformer { config: header.config, weights, adapters };
    validate_shapes(&model)?;
    Ok(model)
}

fn validate_shapes<T: Scalar>(model: &ToyTransformer<T>) -> Result<()> {
    let cfg = &model.config;
    let check = |name: &str, t: &Tensor2D<T>, rows: usize, cols: usize| -> Result<()> {
        if t.rows() != rows || t.cols() != cols {
            return Err(Error::Checkpoint(format!(
                "{name}: expected {rows}x{cols}, got {}x{}",
                t.rows(),
                t.cols()
            )));
        }
        Ok(())
    };
    check("embed", &model.weights.embed, cfg.vocab_size, cfg.model_dim)?;
    for (l, layer) in model.weights.layers.iter().enumerate() {
        check(&format!("layer{l}.attn_norm"), &layer.attn_norm, 1, cfg.model_dim)?;
        check(&format!("layer{l}.wq"), &layer.wq, cfg.model_dim, cfg.model_dim)?;
        check(&format!("layer{l}.wk"), &layer.wk, cfg.model_dim, cfg.model_dim)?;
        check(&format!("layer{l}.wv"), &layer.wv, cfg.model_dim, cfg.model_dim)?;
        check(&format!("layer{l}.wo"), &layer.wo, cfg.model_dim, cfg.model_dim)?;
        check(&format!("layer{l}.mlp_norm"), &layer.mlp_norm, 1, cfg.model_dim)?;
        check(&format!("layer{l}.w_up"), &layer.w_up, cfg.model_dim, cfg.mlp_dim)?;
        check(&format!("layer{l}.w_down"), &layer.w_down, cfg.mlp_dim, cfg.model_dim)?;
    }
    check("final_norm", &model.weights.final_norm, 1, cfg.model_dim)?;
    check("unembed", &model.weights.unembed, cfg.model_dim, cfg.vocab_size)?;
    Ok(())
}

pub fn save<T: Scalar>(model: &ToyTransformer<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ToyTransformer<T>> {
    from_bytes(&std::fs::read(path)?)
}

/// SHA-256 over the serialized container, hex-encoded. Stable across runs for
/// identical weights/config/adapters.
pub fn checksum<T: Scalar>(model: &ToyTransformer<T>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(to_bytes(model));
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
