//! Binary checkpoint archive: magic, JSON header, little-endian `f64`
//! payload, trailing SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crossdsr_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, Models, RoleRecord, TrainConfig, TrainState};
use crate::data::Scale;
use crate::error::{Error, Result};
use crate::networks::{NetworkParams, UncertaintyConvs};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CXDCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage_count: usize,
    channels: Option<usize>,
    scale: Scale,
    epoch: usize,
    e_dsr: Option<f64>,
    e_de: Option<f64>,
    role_history: Vec<RoleRecord>,
    adam_steps: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 4] = ["dsr", "de", "sp", "uncertainty"];

fn params_of<'a>(state: &'a TrainState, group: &str) -> Option<&'a NetworkParams<f32>> {
    match group {
        "dsr" => Some(&state.dsr),
        "de" => Some(&state.de),
        "sp" => state.sp.as_ref(),
        _ => state.uncertainty.as_ref(),
    }
}

fn adam_of<'a>(state: &'a TrainState, group: &str) -> &'a AdamState<f32> {
    match group {
        "dsr" => &state.opt_dsr,
        "de" => &state.opt_de,
        "sp" => &state.opt_sp,
        _ => &state.opt_uncertainty,
    }
}

/// Serializes `state` and atomically replaces `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    let mut adam_steps = BTreeMap::new();
    for group in GROUPS {
        if let Some(p) = params_of(state, group) {
            for (name, t) in p.iter() {
                named.push((format!("{group}/{name}"), t));
            }
        }
        let opt = adam_of(state, group);
        adam_steps.insert(group.to_string(), opt.step);
        for (name, t) in &opt.first {
            named.push((format!("adam/{group}/first/{name}"), t));
        }
        for (name, t) in &opt.second {
            named.push((format!("adam/{group}/second/{name}"), t));
        }
    }
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    let header = Header {
        stage_count: state.dsr.stage_count,
        channels: state.dsr.get("shallow.0.weight").map(|t| t.shape()[0]),
        scale: state.dsr.scale,
        epoch: state.epoch,
        e_dsr: state.e_dsr,
        e_de: state.e_de,
        role_history: state.role_history.clone(),
        adam_steps,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + offset * 8 + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in &named {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

/// Reads and verifies a checkpoint. Nothing is returned unless the whole
/// file checks out.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt(path, "checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&body[16..header_end]).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let payload = &body[header_end..];
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(corrupt(path, "payload size does not match header"));
    }

    let mut groups: BTreeMap<String, NetworkParams<f32>> = BTreeMap::new();
    let mut first: BTreeMap<String, BTreeMap<String, Tensor<f32>>> = BTreeMap::new();
    let mut second: BTreeMap<String, BTreeMap<String, Tensor<f32>>> = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(n).filter(|&e| e <= total).ok_or_else(|| corrupt(path, "bad tensor offset"))?;
        let data = payload[entry.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
            .collect();
        let t = Tensor::from_vec(&entry.shape, data)?;
        let parts: Vec<&str> = entry.name.splitn(4, '/').collect();
        match parts.as_slice() {
            ["adam", group, "first", name] => {
                first.entry(group.to_string()).or_default().insert(name.to_string(), t);
            }
            ["adam", group, "second", name] => {
                second.entry(group.to_string()).or_default().insert(name.to_string(), t);
            }
            [group, ..] if GROUPS.contains(group) => {
                let name = &entry.name[group.len() + 1..];
                let stages = if *group == "dsr" || *group == "de" { header.stage_count } else { 0 };
                groups
                    .entry(group.to_string())
                    .or_insert_with(|| NetworkParams::new(stages, header.scale))
                    .insert(name, t);
            }
            _ => return Err(corrupt(path, format!("unknown tensor {}", entry.name))),
        }
    }
    let mut adam = |group: &str| AdamState {
        step: header.adam_steps.get(group).copied().unwrap_or(0),
        first: first.remove(group).unwrap_or_default(),
        second: second.remove(group).unwrap_or_default(),
    };
    let opt_dsr = adam("dsr");
    let opt_de = adam("de");
    let opt_sp = adam("sp");
    let opt_uncertainty = adam("uncertainty");
    let empty = || NetworkParams::new(header.stage_count, header.scale);
    Ok(TrainState {
        epoch: header.epoch,
        dsr: groups.remove("dsr").unwrap_or_else(empty),
        de: groups.remove("de").unwrap_or_else(empty),
        sp: groups.remove("sp"),
        uncertainty: groups.remove("uncertainty"),
        opt_dsr,
        opt_de,
        opt_sp,
        opt_uncertainty,
        e_dsr: header.e_dsr,
        e_de: header.e_de,
        role_history: header.role_history,
    })
}

impl TrainState {
    /// Checks every parameter set against the networks `cfg` describes and
    /// lists all offending tensors.
    pub fn validate_against(&self, cfg: &TrainConfig) -> Result<()> {
        let models = Models::new(cfg)?;
        let mut problems = Vec::new();
        let scale = cfg.model.scale()?;
        if self.dsr.scale != scale {
            problems.push(format!("checkpoint scale {} differs from configured {scale}", self.dsr.scale));
        }
        if self.dsr.stage_count != cfg.model.stage_count {
            problems.push(format!(
                "checkpoint stage count {} differs from configured {}",
                self.dsr.stage_count, cfg.model.stage_count
            ));
        }
        let mut check = |label: &str, params: Option<&NetworkParams<f32>>, layers: Vec<crate::networks::ConvLayer>| match params {
            Some(p) => {
                if let Err(Error::Checkpoint(msg)) = p.validate(&layers) {
                    problems.push(format!("{label}: {msg}"));
                }
            }
            None => problems.push(format!("{label}: parameters missing")),
        };
        check("dsr", Some(&self.dsr), models.dsr.layers());
        check("de", Some(&self.de), models.de.layers());
        if self.sp.is_some() || self.uncertainty.is_some() {
            check("sp", self.sp.as_ref(), models.sp.layers());
            check("uncertainty", self.uncertainty.as_ref(), UncertaintyConvs.layers());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(problems.join("\n")))
        }
    }
}
