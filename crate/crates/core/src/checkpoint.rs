//! Binary parameter checkpoints with a JSON sidecar.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                    |
//! |--------|------|--------------------------|
//! | 0      | 4    | magic `b"APDM"`          |
//! | 4      | 4    | format version (u32)     |
//! | 8      | 8    | parameter count (u64)    |
//! | 16     | 8·n  | parameters (f64)         |
//!
//! The sidecar `<file>.json` carries the architecture, schedule
//! parameters, seed and stage tag.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, ConditionalDenoiser, ParamVector};
use crate::error::{ApdmError, Result};

pub const MAGIC: [u8; 4] = *b"APDM";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Arch,
    pub schedule: ScheduleParams,
    pub seed: u64,
    pub stage: String,
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    let fmt = |field, detail: String| ApdmError::Format { field, detail };
    if bytes.len() < 4 {
        return Err(fmt("magic", format!("file is {} bytes, too short for the magic", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(fmt("magic", format!("expected {:?}, found {:?}", MAGIC, &bytes[..4])));
    }
    if bytes.len() < 8 {
        return Err(fmt("version", "file ends inside the version field".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fmt("version", format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt("param_count", "file ends inside the parameter count".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let expected = count.checked_mul(8).filter(|&n| n == body.len() as u64);
    if expected.is_none() {
        return Err(fmt(
            "param_count",
            format!("header declares {count} parameters but the body holds {} bytes", body.len()),
        ));
    }
    Ok(ParamVector(
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    ))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_params(path: &Path, params: &[f64]) -> Result<()> {
    std::fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ParamVector> {
    decode_params(&std::fs::read(path)?)
}

pub fn save_checkpoint(model: &ConditionalDenoiser, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    if meta.arch != model.arch {
        return Err(ApdmError::usage("checkpoint metadata arch differs from the model arch"));
    }
    write_params(path, &model.params)?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ConditionalDenoiser, CheckpointMeta)> {
    let params = read_params(path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if meta.arch.n_params() != params.len() {
        return Err(ApdmError::Format {
            field: "param_count",
            detail: format!(
                "file holds {} parameters, sidecar arch needs {}",
                params.len(),
                meta.arch.n_params()
            ),
        });
    }
    let model = ConditionalDenoiser::from_params(meta.arch.clone(), params)?;
    Ok((model, meta))
}
