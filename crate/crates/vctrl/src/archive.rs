//! `VCNT` named-tensor archive for model parameters.
//!
//! Little endian: magic `VCNT`, `u16` version 1, `u32` tensor count, then per
//! tensor a `u32` name length, UTF-8 name, `u32` rank, `u32` dims and the `f32`
//! payload. Tensors appear in [`ParamSet`] visit order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vctrl_core::ParamSet;

use crate::container::Reader;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"VCNT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub sha256: String,
    pub num_params: usize,
    pub tensors: Vec<ManifestEntry>,
}

pub fn to_bytes<P: ParamSet>(params: &P) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest<P: ParamSet>(params: &P) -> Manifest {
    Manifest {
        format: "VCNT/1".into(),
        sha256: sha256_hex(&to_bytes(params)),
        num_params: params.num_params(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, t)| ManifestEntry {
                name,
                shape: t.shape.clone(),
            })
            .collect(),
    }
}

/// Overwrites every tensor of `params` from `bytes`; names, order and shapes
/// must match exactly.
pub fn load_into<P: ParamSet>(params: &mut P, bytes: &[u8]) -> CliResult<()> {
    let bad = |msg: String| CliError::Format(format!("VCNT: {msg}"));
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic".into()));
    }
    if r.u16() != Some(1) {
        return Err(bad("unsupported version".into()));
    }
    let count = r.u32().ok_or_else(|| bad("truncated".into()))? as usize;
    let mut stored = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated".into()))? as usize;
        let name = r.take(len).ok_or_else(|| bad("truncated name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8".into()))?;
        let rank = r.u32().ok_or_else(|| bad("truncated".into()))? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated shape".into()))?;
        let n: usize = shape.iter().product();
        let payload = r
            .take(4 * n)
            .ok_or_else(|| bad(format!("truncated payload for {name}")))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        stored.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    let expected = params.tensors().len();
    if expected != stored.len() {
        return Err(bad(format!(
            "archive has {} tensors, model has {expected}",
            stored.len()
        )));
    }
    let mut i = 0;
    let mut err = None;
    params.visit_mut(&mut |name, t| {
        let (sname, shape, data) = &stored[i];
        i += 1;
        if err.is_none() && (sname != name || shape != &t.shape) {
            err = Some(bad(format!(
                "expected {name} {:?}, found {sname} {shape:?}",
                t.shape
            )));
        } else if err.is_none() {
            t.data.copy_from_slice(data);
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn write<P: ParamSet>(params: &P, path: &Path) -> CliResult<Manifest> {
    let bytes = to_bytes(params);
    fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    Ok(manifest(params))
}

pub fn read_into<P: ParamSet>(params: &mut P, path: &Path) -> CliResult<()> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    load_into(params, &bytes)
}

/// Rounds every parameter through `f32` so the in-memory model equals what a
/// reload from disk would produce.
pub fn quantize<P: ParamSet>(params: &mut P) {
    params.visit_mut(&mut |_, t| t.data.iter_mut().for_each(|v| *v = *v as f32 as f64));
}
