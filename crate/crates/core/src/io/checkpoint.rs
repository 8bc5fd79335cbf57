use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{f32_from_le_bytes, f32_to_le_bytes, read_bytes, read_json, with_suffix, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::net::{AdamState, ArchConfig, NetworkParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const FAMILY: [&str; 2] = [".ckpt.json", ".ckpt.bin"];

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Adam moments, one buffer per trainable tensor in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub rng_seed: u64,
    pub loss_history: Vec<RoundRecord>,
    /// Round whose parameters this checkpoint holds.
    #[serde(default)]
    pub best_round: Option<usize>,
    /// Factor the regression targets were multiplied by.
    #[serde(default = "unit_scale")]
    pub map_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            loss_history: Vec::new(),
            best_round: None,
            map_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: ArchConfig,
    /// Trainable tensors followed by batch-norm running statistics.
    pub tensors: Vec<NamedTensor>,
    /// Integer state such as per-layer batch counts.
    pub counters: BTreeMap<String, u64>,
    pub optimizer: Option<OptimizerState>,
    pub training_meta: TrainingMeta,
}

impl Checkpoint {
    pub fn from_network(
        net: &NetworkParams<f32>,
        optimizer: Option<&AdamState<f32>>,
        training_meta: TrainingMeta,
    ) -> Self {
        let tensors = net
            .trainable()
            .into_iter()
            .chain(net.buffers())
            .map(|p| NamedTensor {
                name: p.name,
                shape: p.shape,
                data: p.data.to_vec(),
            })
            .collect();
        let counters = net
            .blocks
            .iter()
            .map(|b| (format!("{}.bn.batches_tracked", b.name), b.bn.batches_tracked))
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: net.arch,
            tensors,
            counters,
            optimizer: optimizer.map(|s| OptimizerState {
                step: s.step,
                first_moment: s.first_moment.clone(),
                second_moment: s.second_moment.clone(),
            }),
            training_meta,
        }
    }

    /// Rebuilds the network, requiring every tensor to be present with the
    /// shape the architecture implies.
    pub fn to_network(&self) -> Result<NetworkParams<f32>> {
        let mut net = NetworkParams::<f32>::init(self.arch, 0)?;
        let by_name: BTreeMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let shapes: BTreeMap<String, Vec<usize>> = net
            .trainable()
            .into_iter()
            .chain(net.buffers())
            .map(|p| (p.name, p.shape))
            .collect();
        if by_name.len() != shapes.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, architecture needs {}",
                by_name.len(),
                shapes.len()
            )));
        }
        let fill = |name: String, slot: &mut Vec<f32>| -> Result<()> {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))?;
            if t.shape != shapes[&name] {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {:?}, architecture needs {:?}",
                    t.shape, shapes[&name]
                )));
            }
            slot.clone_from(&t.data);
            Ok(())
        };
        for (name, slot) in net.trainable_mut() {
            fill(name, slot)?;
        }
        for (name, slot) in net.buffers_mut() {
            fill(name, slot)?;
        }
        for b in &mut net.blocks {
            let key = format!("{}.bn.batches_tracked", b.name);
            b.bn.batches_tracked = self.counters.get(&key).copied().unwrap_or(0);
        }
        Ok(net)
    }

    pub fn adam_state(&self) -> Option<AdamState<f32>> {
        self.optimizer.as_ref().map(|o| AdamState {
            step: o.step,
            first_moment: o.first_moment.clone(),
            second_moment: o.second_moment.clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Span {
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    first_moment: Vec<Span>,
    second_moment: Vec<Span>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
    counters: BTreeMap<String, u64>,
    optimizer: Option<OptimizerEntry>,
    training_meta: TrainingMeta,
    blob_len: usize,
}

fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, &FAMILY, ".ckpt.json")
}

fn blob_path(path: &Path) -> PathBuf {
    with_suffix(path, &FAMILY, ".ckpt.bin")
}

fn check_finite(name: &str, data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::Invalid(format!("tensor {name} has a non-finite value at {index}"))),
        None => Ok(()),
    }
}

/// Writes `<name>.ckpt.json` (manifest with offsets in floats) and
/// `<name>.ckpt.bin` (all tensors, then optimizer moments).
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(ckpt.format_version));
    }
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |name: &str, data: &[f32]| -> Result<Span> {
        check_finite(name, data)?;
        let span = Span {
            offset: blob.len(),
            len: data.len(),
        };
        blob.extend_from_slice(data);
        Ok(span)
    };
    let mut tensors = Vec::with_capacity(ckpt.tensors.len());
    for t in &ckpt.tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::Shape(format!(
                "tensor {} declares shape {:?} but holds {} values",
                t.name,
                t.shape,
                t.data.len()
            )));
        }
        let s = push(&t.name, &t.data)?;
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: s.offset,
            len: s.len,
        });
    }
    let optimizer = match &ckpt.optimizer {
        None => None,
        Some(o) => Some(OptimizerEntry {
            step: o.step,
            first_moment: o.first_moment.iter().map(|m| push("first_moment", m)).collect::<Result<_>>()?,
            second_moment: o.second_moment.iter().map(|m| push("second_moment", m)).collect::<Result<_>>()?,
        }),
    };
    let manifest = Manifest {
        format_version: ckpt.format_version,
        arch: ckpt.arch,
        tensors,
        counters: ckpt.counters.clone(),
        optimizer,
        training_meta: ckpt.training_meta.clone(),
        blob_len: blob.len(),
    };
    write_json(&manifest, &manifest_path(path))?;
    write_bytes(&blob_path(path), &f32_to_le_bytes(&blob))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mp = manifest_path(path);
    let version: serde_json::Value = read_json(&mp)?;
    let found = version.get("format_version").and_then(|v| v.as_u64());
    match found {
        Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(u32::try_from(v).unwrap_or(u32::MAX))),
        None => return Err(Error::format(&mp, "missing format_version")),
    }
    let manifest: Manifest = serde_json::from_value(version).map_err(|e| Error::format(&mp, e))?;
    let bytes = read_bytes(&blob_path(path))?;
    if bytes.len() != manifest.blob_len * 4 {
        return Err(Error::SizeMismatch {
            expected: manifest.blob_len * 4,
            found: bytes.len(),
        });
    }
    let blob = f32_from_le_bytes(&bytes);
    let take = |offset: usize, len: usize| -> Result<Vec<f32>> {
        let end = offset.checked_add(len).filter(|&e| e <= blob.len()).ok_or(Error::SizeMismatch {
            expected: offset.saturating_add(len) * 4,
            found: bytes.len(),
        })?;
        Ok(blob[offset..end].to_vec())
    };
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in manifest.tensors {
        let expected = t.shape.iter().product::<usize>();
        if expected != t.len {
            return Err(Error::SizeMismatch {
                expected: expected * 4,
                found: t.len * 4,
            });
        }
        tensors.push(NamedTensor {
            data: take(t.offset, t.len)?,
            name: t.name,
            shape: t.shape,
        });
    }
    let optimizer = match manifest.optimizer {
        None => None,
        Some(o) => Some(OptimizerState {
            step: o.step,
            first_moment: o.first_moment.iter().map(|s| take(s.offset, s.len)).collect::<Result<_>>()?,
            second_moment: o.second_moment.iter().map(|s| take(s.offset, s.len)).collect::<Result<_>>()?,
        }),
    };
    Ok(Checkpoint {
        format_version: manifest.format_version,
        arch: manifest.arch,
        tensors,
        counters: manifest.counters,
        optimizer,
        training_meta: manifest.training_meta,
    })
}
