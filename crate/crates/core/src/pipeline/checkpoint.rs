//! Binary checkpoint: `AFTK`, u32 version, u64 header length, JSON header
//! (config and tensor manifest), then little-endian scalars.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, Scalar, ScalarKind, Tensor, WarmupCosine};
use crate::sacm::GateParams;
use crate::vit::{EncoderParams, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFTK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model and, optionally, the optimizer that was training it.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    kind: ScalarKind,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    schedule: WarmupCosine,
    momentum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    scalar_kind: ScalarKind,
    step_index: usize,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<ManifestEntry>,
}

/// Names and shapes the config implies, in payload order.
fn expected_layout(cfg: &ModelConfig, with_optimizer: bool) -> Vec<(String, Vec<usize>)> {
    let shapes = EncoderParams::<Vec<usize>>::shapes(cfg);
    let names = shapes.names();
    let params: Vec<(String, Vec<usize>)> = names.into_iter().zip(shapes.slots().into_iter().cloned()).collect();
    let mut layout = params.clone();
    layout.extend(
        GateParams::<f32>::NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(GateParams::<f32>::shapes(cfg)),
    );
    if with_optimizer {
        layout.extend(params.into_iter().map(|(n, s)| (format!("velocity.{n}"), s)));
    }
    layout
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, optimizer: Option<&OptimizerState<T>>) -> Result<()> {
    model.params.check_shapes(&model.cfg)?;
    let mut tensors: Vec<&Tensor<T>> = model.params.slots();
    tensors.extend(model.gates.tensors());
    if let Some(opt) = optimizer {
        if opt.velocity.len() != model.params.slots().len() {
            return Err(Error::Integrity("optimizer velocity does not match the parameter set".into()));
        }
        tensors.extend(opt.velocity.iter());
    }
    let layout = expected_layout(&model.cfg, optimizer.is_some());
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for ((name, shape), t) in layout.into_iter().zip(&tensors) {
        if t.shape() != shape.as_slice() {
            return Err(Error::Integrity(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        let nbytes = (t.len() * T::KIND.size_of()) as u64;
        manifest.push(ManifestEntry {
            name,
            shape,
            kind: T::KIND,
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = Header {
        config: model.cfg.clone(),
        scalar_kind: T::KIND,
        step_index: optimizer.map_or(0, |o| o.step_index),
        optimizer: optimizer.map(|o| OptimizerMeta {
            schedule: o.schedule,
            momentum: o.momentum,
        }),
        tensors: manifest,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Reads and fully validates a checkpoint before returning anything.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
        bytes
            .get(range)
            .ok_or_else(|| integrity(format!("{} is truncated", path.display())))
    };
    if take(0..4)? != CHECKPOINT_MAGIC {
        return Err(integrity(format!("{} is not an AFTK checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(4..8)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(integrity(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(take(8..16)?.try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| integrity("header length overflows"))?;
    let header: Header =
        serde_json::from_slice(take(16..header_end)?).map_err(|e| integrity(format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| integrity(format!("stored config is invalid: {e}")))?;
    if header.scalar_kind != T::KIND {
        return Err(integrity(format!(
            "checkpoint holds {:?} scalars, {:?} requested",
            header.scalar_kind,
            T::KIND
        )));
    }

    let layout = expected_layout(&header.config, header.optimizer.is_some());
    if layout.len() != header.tensors.len() {
        return Err(integrity(format!(
            "manifest lists {} tensors, the config implies {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    let mut offset = 0u64;
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        let nbytes = (shape.iter().product::<usize>() * T::KIND.size_of()) as u64;
        if &entry.name != name || &entry.shape != shape {
            return Err(integrity(format!(
                "manifest entry {} {:?} does not match the config's {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        if entry.kind != T::KIND || entry.offset != offset || entry.nbytes != nbytes {
            return Err(integrity(format!("manifest entry {name} has a bad kind, offset or size")));
        }
        offset += nbytes;
    }
    let payload = &bytes[header_end.min(bytes.len())..];
    if payload.len() as u64 != offset {
        return Err(integrity(format!(
            "payload has {} bytes, manifest needs {offset}",
            payload.len()
        )));
    }

    let size = T::KIND.size_of();
    let mut tensors = header.tensors.iter().map(|e| {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(e.shape.clone(), data).expect("shape checked against nbytes")
    });
    let template = EncoderParams::<Vec<usize>>::shapes(&header.config).map(|_, _| ());
    let count = template.slots().len();
    let params = EncoderParams::from_slots(&template, tensors.by_ref().take(count).collect())?;
    let gates = GateParams::from_tensors(&header.config, tensors.by_ref().take(4).collect())?;
    let optimizer = header.optimizer.map(|meta| OptimizerState {
        step_index: header.step_index,
        schedule: meta.schedule,
        momentum: meta.momentum,
        velocity: tensors.collect(),
    });
    Ok(Checkpoint {
        model: Model {
            cfg: header.config,
            params,
            gates,
        },
        optimizer,
    })
}
