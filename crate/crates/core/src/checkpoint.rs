//! Per-model checkpoint files: `<role>.json` metadata and a `<role>.bin`
//! little-endian f32 payload (parameters, then optimizer moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Model;
use crate::nn::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub format_version: u32,
    pub role: String,
    pub architecture: serde_json::Value,
    pub step: u64,
    pub params: Vec<(String, Vec<usize>)>,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub step: u64,
}

fn push_f32(out: &mut Vec<u8>, tensors: &[Tensor<f32>]) {
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_model<M: Model<f32>>(dir: &Path, role: &str, model: &M, step: u64, opt: Option<&Adam<f32>>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.params();
    let meta = ModelMeta {
        format_version: CHECKPOINT_VERSION,
        role: role.to_string(),
        architecture: model.architecture(),
        step,
        params: params.shapes(),
        optimizer: opt.map(|o| OptimizerMeta {
            config: o.config,
            step: o.steps(),
        }),
    };
    let mut payload = Vec::with_capacity(params.num_scalars() * 4 * if opt.is_some() { 3 } else { 1 });
    push_f32(&mut payload, &params.iter().map(|p| p.value.clone()).collect::<Vec<_>>());
    if let Some(o) = opt {
        let (m, v) = o.moments();
        push_f32(&mut payload, m);
        push_f32(&mut payload, v);
    }
    fs::write(dir.join(format!("{role}.bin")), payload)?;
    fs::write(dir.join(format!("{role}.json")), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads a checkpoint into an already-built model of the same architecture.
/// Returns the stored step.
pub fn load_model<M: Model<f32>>(dir: &Path, role: &str, model: &mut M, opt: Option<&mut Adam<f32>>) -> Result<u64> {
    let meta_path = dir.join(format!("{role}.json"));
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| Error::CorruptHeader {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion {
            path: meta_path,
            found: meta.format_version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if meta.architecture != model.architecture() {
        return Err(Error::Structure(format!(
            "{role}: checkpoint architecture {} does not match {}",
            meta.architecture,
            model.architecture()
        )));
    }
    let shapes = model.params().shapes();
    if meta.params != shapes {
        return Err(Error::Structure(format!("{role}: parameter layout differs from the model")));
    }
    let n: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let blocks = if meta.optimizer.is_some() { 3 } else { 1 };
    let bin_path = dir.join(format!("{role}.bin"));
    let bytes = fs::read(&bin_path)?;
    if bytes.len() != n * 4 * blocks {
        return Err(Error::PayloadSize {
            path: bin_path,
            expected: n * 4 * blocks,
            found: bytes.len(),
        });
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let split = |block: usize| -> Result<Vec<Tensor<f32>>> {
        let mut off = block * n;
        shapes
            .iter()
            .map(|(_, s)| {
                let len: usize = s.iter().product();
                let t = Tensor::from_vec(s, floats[off..off + len].to_vec());
                off += len;
                t
            })
            .collect()
    };
    model.params_mut().write(split(0)?)?;
    match (opt, meta.optimizer) {
        (Some(o), Some(om)) => {
            o.config = om.config;
            o.restore(om.step, split(1)?, split(2)?)?;
        }
        (Some(_), None) => {
            return Err(Error::Structure(format!("{role}: checkpoint has no optimizer state")));
        }
        _ => {}
    }
    Ok(meta.step)
}
