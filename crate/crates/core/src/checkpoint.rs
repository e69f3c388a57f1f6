//! Binary checkpoints: magic, little-endian header length, JSON header, then
//! raw little-endian f32 payload.
//!
//! The header carries the model configuration, a format version, and for
//! every tensor its name, shape and position in the payload. Training
//! checkpoints additionally hold the Adam moments and progress counters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dpm_tensor::Module;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{InitScheme, ParamInit};
use crate::model::{DpmFormer, ModelConfig};
use crate::optim::AdamState;

const MAGIC: &[u8; 8] = b"DPMCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    m_offset: usize,
    v_offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    t: u64,
    moments: Vec<MomentEntry>,
}

/// Where training stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Optimization steps completed.
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    progress: Option<Progress>,
}

/// Optimizer moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedOptimizer {
    pub t: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Parameter name → (shape, values), in save order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<SavedOptimizer>,
    pub progress: Option<Progress>,
}

/// Serializes a model and, optionally, optimizer state and progress.
pub fn save(
    path: &Path,
    model: &DpmFormer<f32>,
    optimizer: Option<&AdamState<f32>>,
    progress: Option<Progress>,
) -> Result<()> {
    let mut payload: Vec<f32> = Vec::new();
    let mut tensors = Vec::new();
    let params = model.parameters();
    for p in &params {
        tensors.push(TensorEntry {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            offset: payload.len(),
            len: p.numel(),
        });
        payload.extend_from_slice(p.value().data());
    }
    let optimizer = optimizer.map(|st| {
        let moments = params
            .iter()
            .zip(st.m.iter().zip(&st.v))
            .map(|(p, (m, v))| {
                let m_offset = payload.len();
                payload.extend_from_slice(m);
                let v_offset = payload.len();
                payload.extend_from_slice(v);
                MomentEntry {
                    name: p.name().to_string(),
                    m_offset,
                    v_offset,
                    len: m.len(),
                }
            })
            .collect();
        OptimizerHeader { t: st.t, moments }
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        tensors,
        optimizer,
        progress,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + 4 * payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn slice(payload: &[f32], offset: usize, len: usize, what: &str) -> Result<Vec<f32>> {
    payload
        .get(offset..offset + len)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| Error::Checkpoint(format!("{what}: payload range out of bounds")))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let raw = &bytes[16 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(Error::Checkpoint(
            "payload is not a whole number of f32 values".into(),
        ));
    }
    let payload: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let tensors = header
        .tensors
        .iter()
        .map(|t| {
            if t.shape.iter().product::<usize>() != t.len {
                return Err(Error::Checkpoint(format!(
                    "{}: shape and length disagree",
                    t.name
                )));
            }
            Ok((
                t.name.clone(),
                t.shape.clone(),
                slice(&payload, t.offset, t.len, &t.name)?,
            ))
        })
        .collect::<Result<_>>()?;
    let optimizer = header
        .optimizer
        .map(|o| -> Result<SavedOptimizer> {
            let moments = o
                .moments
                .iter()
                .map(|e| {
                    Ok((
                        e.name.clone(),
                        (
                            slice(&payload, e.m_offset, e.len, &e.name)?,
                            slice(&payload, e.v_offset, e.len, &e.name)?,
                        ),
                    ))
                })
                .collect::<Result<_>>()?;
            Ok(SavedOptimizer { t: o.t, moments })
        })
        .transpose()?;
    Ok(Checkpoint {
        model: header.model,
        tensors,
        optimizer,
        progress: header.progress,
    })
}

impl Checkpoint {
    /// Copies stored values into `model`. Fails on the first parameter (in
    /// the model's order) that is missing or has a different shape, or on a
    /// stored tensor the model does not have.
    pub fn apply(&self, model: &mut DpmFormer<f32>) -> Result<()> {
        let stored: BTreeMap<&str, (&Vec<usize>, &Vec<f32>)> = self
            .tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        let mut seen = 0usize;
        let mut failure = None;
        model.visit(&mut |p| {
            if failure.is_some() {
                return;
            }
            match stored.get(p.name()) {
                None => {
                    failure = Some(Error::CheckpointMismatch {
                        name: p.name().to_string(),
                        msg: "missing from checkpoint".into(),
                    })
                }
                Some((shape, _)) if shape.as_slice() != p.shape() => {
                    failure = Some(Error::CheckpointMismatch {
                        name: p.name().to_string(),
                        msg: format!("checkpoint shape {shape:?}, model shape {:?}", p.shape()),
                    })
                }
                Some(_) => seen += 1,
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if seen != stored.len() {
            let names: Vec<String> = model
                .parameters()
                .iter()
                .map(|p| p.name().to_string())
                .collect();
            let extra = self
                .tensors
                .iter()
                .find(|(n, _, _)| !names.contains(n))
                .map(|(n, _, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::CheckpointMismatch {
                name: extra,
                msg: "not present in the model".into(),
            });
        }
        model.visit_mut(&mut |p| {
            let (_, data) = stored[p.name()];
            p.set_data(data.clone());
        });
        Ok(())
    }

    /// Builds the stored architecture and loads its weights.
    pub fn build_model(&self) -> Result<DpmFormer<f32>> {
        let mut model = DpmFormer::new(&ParamInit::new(0, InitScheme::ZeroWeights), &self.model)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    /// Optimizer state in `model`'s parameter order.
    pub fn adam_state(&self, model: &DpmFormer<f32>) -> Result<Option<AdamState<f32>>> {
        let Some(o) = &self.optimizer else {
            return Ok(None);
        };
        let mut st = AdamState {
            m: Vec::new(),
            v: Vec::new(),
            t: o.t,
        };
        for p in model.parameters() {
            let (m, v) = o
                .moments
                .get(p.name())
                .ok_or_else(|| Error::CheckpointMismatch {
                    name: p.name().to_string(),
                    msg: "optimizer moments missing".into(),
                })?;
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(Error::CheckpointMismatch {
                    name: p.name().to_string(),
                    msg: "optimizer moment size differs".into(),
                });
            }
            st.m.push(m.clone());
            st.v.push(v.clone());
        }
        Ok(Some(st))
    }
}
