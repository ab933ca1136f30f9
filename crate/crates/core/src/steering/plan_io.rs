//! Plan files: a JSON summary plus a binary backend payload in the weight
//! container format (`LTSFPLN` + version byte, little-endian body, CRC32).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::io::{ByteReader, ByteWriter};

use super::{BackendKind, Gating, SteeringBackend, SteeringPlan, SteeringPolicyConfig};

pub const PLAN_MAGIC_PREFIX: &[u8; 7] = b"LTSFPLN";
const PLAN_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRef {
    pub kind: BackendKind,
    pub k: usize,
    /// Relative to the directory holding the plan JSON.
    pub payload_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub r_s: f64,
    pub lambda: f64,
    pub gating: Gating,
    pub mask: Vec<u8>,
    pub intensities: Vec<f64>,
    pub backend: BackendRef,
    pub scores_hash: String,
    pub degenerate: bool,
    pub r_s_effective: f64,
    pub clamped_negative: usize,
    pub policy: SteeringPolicyConfig,
}

pub(crate) fn encode_backend(b: &SteeringBackend) -> Vec<u8> {
    let mut w = ByteWriter::new(PLAN_MAGIC_PREFIX, PLAN_VERSION);
    match b {
        SteeringBackend::MeanShift { directions, scales } => {
            w.u8(0);
            w.usize(directions.len());
            for (v, s) in directions.iter().zip(scales) {
                w.f64(*s);
                w.f64s(v);
            }
        }
        SteeringBackend::NullSpace { bases } => {
            w.u8(1);
            w.usize(bases.len());
            for u in bases {
                w.usize(u.len());
                for col in u {
                    w.f64s(col);
                }
            }
        }
    }
    w.finish()
}

pub(crate) fn decode_backend(bytes: &[u8]) -> Result<SteeringBackend> {
    let mut r = ByteReader::open(bytes, PLAN_MAGIC_PREFIX, PLAN_VERSION)?;
    let kind = r.u8()?;
    let n = r.usize()?;
    let b = match kind {
        0 => {
            let mut directions = Vec::with_capacity(n.min(4096));
            let mut scales = Vec::with_capacity(n.min(4096));
            for _ in 0..n {
                scales.push(r.f64()?);
                directions.push(r.f64s()?);
            }
            SteeringBackend::MeanShift { directions, scales }
        }
        1 => {
            let mut bases = Vec::with_capacity(n.min(4096));
            for _ in 0..n {
                let k = r.usize()?;
                bases.push((0..k).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?);
            }
            SteeringBackend::NullSpace { bases }
        }
        other => return Err(Error::Format(format!("unknown backend kind {other}"))),
    };
    r.finish()?;
    b.validate()?;
    Ok(b)
}

/// Writes `<stem>.json` and the payload `<stem>.bin` next to it.
pub fn save_plan(plan: &SteeringPlan, json_path: &Path) -> Result<()> {
    let payload = json_path.with_extension("bin");
    let payload_name = payload
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Input(format!("bad plan path {}", json_path.display())))?
        .to_string();
    fs::write(&payload, encode_backend(&plan.backend)).map_err(|e| Error::io(&payload, e))?;
    let file = PlanFile {
        r_s: plan.policy.r_s,
        lambda: plan.policy.lambda,
        gating: plan.policy.gating,
        mask: plan.mask.iter().map(|&m| m as u8).collect(),
        intensities: plan.intensities.clone(),
        backend: BackendRef {
            kind: plan.backend.kind(),
            k: plan.backend.rank(),
            payload_file: payload_name,
        },
        scores_hash: plan.scores_hash.clone(),
        degenerate: plan.degenerate,
        r_s_effective: plan.r_s_effective,
        clamped_negative: plan.clamped_negative,
        policy: plan.policy.clone(),
    };
    let text = serde_json::to_string_pretty(&file)? + "\n";
    fs::write(json_path, text).map_err(|e| Error::io(json_path, e))
}

pub fn load_plan(json_path: &Path) -> Result<SteeringPlan> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let f: PlanFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
    let payload = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&f.backend.payload_file);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let backend = decode_backend(&bytes)?;
    if backend.kind() != f.backend.kind {
        return Err(Error::Validation(
            "plan JSON and payload disagree on the backend kind".into(),
        ));
    }
    let l = f.intensities.len();
    if f.mask.len() != l || backend.n_layers() != l {
        return Err(Error::Validation("plan layer counts disagree".into()));
    }
    let mask: Vec<bool> = f.mask.iter().map(|&m| m != 0).collect();
    if f.intensities
        .iter()
        .zip(&mask)
        .any(|(&x, &m)| !x.is_finite() || x < 0.0 || (!m && x != 0.0))
    {
        return Err(Error::Validation(
            "plan intensities must be finite, >= 0 and 0 off the mask".into(),
        ));
    }
    Ok(SteeringPlan {
        mask,
        intensities: f.intensities,
        backend,
        policy: f.policy,
        r_s_effective: f.r_s_effective,
        degenerate: f.degenerate,
        clamped_negative: f.clamped_negative,
        scores_hash: f.scores_hash,
    })
}
