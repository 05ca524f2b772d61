//! Self-describing JSON checkpoints.
//!
//! Every `f64` is stored as the 16-hex-digit big-endian image of its bit
//! pattern, so a save/load round trip is bit-exact (including `-0.0`).
//! Mask bitmaps are hex strings, bytes in order, least significant bit
//! first within each byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, LayeredClassifier, ModelDims, ModelError, PruneMask, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dims: ModelDims,
    pub activation: Activation,
    pub block_count: usize,
    pub block_origins: Vec<usize>,
    pub params: Vec<ParamEntry>,
    pub masks: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub name: String,
    pub len: usize,
    pub bits: String,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn encode_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn decode_f64(s: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(err(format!("bad float encoding `{s}`")));
    }
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| err(format!("bad float encoding `{s}`")))
}

fn encode_bits(keep: &[bool]) -> String {
    keep.chunks(8)
        .map(|c| {
            let byte = c
                .iter()
                .enumerate()
                .fold(0u8, |b, (i, k)| if *k { b | (1 << i) } else { b });
            format!("{byte:02x}")
        })
        .collect()
}

fn decode_bits(s: &str, len: usize) -> Result<Vec<bool>> {
    if s.len() != 2 * len.div_ceil(8) {
        return Err(err(format!("bitmap of {} chars cannot hold {len} bits", s.len())));
    }
    let mut out = Vec::with_capacity(len);
    for i in 0..s.len() / 2 {
        let byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| err(format!("bad bitmap byte at {i}")))?;
        for b in 0..8 {
            if out.len() < len {
                out.push(byte & (1 << b) != 0);
            }
        }
    }
    Ok(out)
}

impl Checkpoint {
    pub fn from_model(model: &LayeredClassifier) -> Self {
        let registry = model.registry();
        let params = registry
            .iter()
            .zip(model.params())
            .map(|(info, t)| ParamEntry {
                name: info.name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| encode_f64(*v)).collect(),
            })
            .collect();
        let mut masks = Vec::new();
        for (i, b) in model.blocks.iter().enumerate() {
            for (field, m) in [("w1", &b.mask_w1), ("w2", &b.mask_w2)] {
                if let Some(m) = m {
                    let keep: Vec<bool> = m.data().iter().map(|v| *v != 0.0).collect();
                    masks.push(MaskEntry {
                        name: format!("blocks.{i}.{field}"),
                        len: keep.len(),
                        bits: encode_bits(&keep),
                    });
                }
            }
        }
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: model.dims,
            activation: model.activation,
            block_count: model.depth(),
            block_origins: model.blocks.iter().map(|b| b.origin).collect(),
            params,
            masks,
        }
    }

    pub fn into_model(self) -> Result<LayeredClassifier> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(err(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.block_origins.len() != self.block_count {
            return Err(err("block_origins length differs from block_count"));
        }
        let mut model = LayeredClassifier::zeros(self.dims, self.block_count);
        model.activation = self.activation;
        for (b, o) in model.blocks.iter_mut().zip(&self.block_origins) {
            b.origin = *o;
        }
        let registry = model.registry();
        if registry.len() != self.params.len() {
            return Err(err(format!(
                "expected {} parameters, found {}",
                registry.len(),
                self.params.len()
            )));
        }
        for ((info, slot), entry) in registry.iter().zip(model.params_mut()).zip(&self.params) {
            if entry.name != info.name || entry.shape != info.shape {
                return Err(err(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    entry.name, entry.shape, info.name, info.shape
                )));
            }
            let data = entry
                .data
                .iter()
                .map(|s| decode_f64(s))
                .collect::<Result<Vec<_>>>()?;
            *slot = Tensor::new(entry.shape.clone(), data)?;
        }
        if !self.masks.is_empty() {
            let mut mask = PruneMask::dense(&model);
            for entry in &self.masks {
                let slot = parse_mask_name(&entry.name, self.block_count)
                    .ok_or_else(|| err(format!("unknown mask target `{}`", entry.name)))?;
                if mask.keep[slot].len() != entry.len {
                    return Err(err(format!("mask `{}` has wrong length", entry.name)));
                }
                mask.keep[slot] = decode_bits(&entry.bits, entry.len)?;
            }
            // the stored weights already hold zeros at pruned coordinates;
            // re-applying only reinstates the pin
            let weights: Vec<Tensor> = model.params().into_iter().cloned().collect();
            model.apply_mask(&mask)?;
            for (slot, w) in model.params_mut().into_iter().zip(weights) {
                *slot = w;
            }
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| err(e.to_string()))
    }
}

fn parse_mask_name(name: &str, depth: usize) -> Option<usize> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, field) = rest.split_once('.')?;
    let i: usize = idx.parse().ok()?;
    if i >= depth {
        return None;
    }
    match field {
        "w1" => Some(2 * i),
        "w2" => Some(2 * i + 1),
        _ => None,
    }
}

impl LayeredClassifier {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, Checkpoint::from_model(self).to_json())
            .map_err(|e| err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| err(format!("{}: {e}", path.display())))?;
        Checkpoint::from_json(&s)?.into_model()
    }
}
