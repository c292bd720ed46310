//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{ArchConfig, CoupledDenoiser, ParamGroup, ParamStore, Tensor};
use super::schedule::{NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"COBLCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gates {
    pub coupling: f64,
    pub adapter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub schedule: ScheduleParams,
    pub gates: Gates,
    pub theta_frozen: bool,
    pub tensors: Vec<TensorInfo>,
    /// Free-form training metadata (optimizer, steps, losses, ...).
    pub metadata: serde_json::Value,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Serializes `model` to bytes.
pub fn to_bytes(model: &CoupledDenoiser, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        arch: model.arch.clone(),
        schedule: model.schedule.params.clone(),
        gates: Gates {
            coupling: model.coupling_gate(),
            adapter: model.adapter_gate(),
        },
        theta_frozen: model.theta_frozen,
        tensors: model
            .params
            .tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                group: t.group,
                shape: t.shape.clone(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&serde_json::to_value(&header)?)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.params.count(None));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &model.params.tensors {
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &CoupledDenoiser, metadata: serde_json::Value, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, metadata)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint; `path` is only used in error messages.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(CoupledDenoiser, CheckpointHeader)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| format_err(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let mut rest = &bytes[16 + len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        if rest.len() < 4 * n {
            return Err(format_err(path, format!("truncated data for {}", info.name)));
        }
        let data = rest[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        rest = &rest[4 * n..];
        tensors.push(Tensor {
            name: info.name.clone(),
            group: info.group,
            shape: info.shape.clone(),
            data,
        });
    }
    if !rest.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", rest.len())));
    }
    let schedule = NoiseSchedule::new(header.schedule.clone())?;
    let mut model = CoupledDenoiser::from_params(
        header.arch.clone(),
        schedule,
        ParamStore { tensors },
        header.theta_frozen,
    )
    .map_err(|e| format_err(path, e))?;
    model.set_gates(header.gates.coupling, header.gates.adapter)?;
    Ok((model, header))
}

pub fn load(path: &Path) -> Result<(CoupledDenoiser, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Hex SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
