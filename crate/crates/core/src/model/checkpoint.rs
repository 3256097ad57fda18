//! Binary checkpoint format.
//!
//! Layout: magic `EGAMCKPT`, format version (u32 LE), header length (u64 LE),
//! JSON header, then every parameter's values in store order as
//! little-endian floats of the header's precision.

use std::path::Path;

use egam_tensor::{Real, Tensor, PRECISION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Policy;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::problems::{ProblemKind, EDGE_FEATURES};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EGAMCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    kind: ProblemKind,
    node_features: usize,
    edge_features: usize,
    precision: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

const REAL_BYTES: usize = std::mem::size_of::<Real>();

pub fn write_checkpoint(policy: &Policy) -> Vec<u8> {
    let store = policy.store();
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: policy.config().clone(),
        kind: policy.kind(),
        node_features: policy.kind().node_features(),
        edge_features: EDGE_FEATURES,
        precision: PRECISION.to_string(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(json.len() + store.num_scalars() * REAL_BYTES + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Policy> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(len))
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    if header.precision != PRECISION {
        return Err(bad(format!(
            "stored in {} but this build uses {PRECISION}",
            header.precision
        )));
    }
    if header.node_features != header.kind.node_features() || header.edge_features != EDGE_FEATURES {
        return Err(bad("feature widths do not match the problem kind".into()));
    }
    let mut policy = Policy::new(header.config, header.kind, &mut ChaCha8Rng::seed_from_u64(0))?;
    let ids: Vec<_> = policy.store().ids().collect();
    if ids.len() != header.params.len() {
        return Err(bad(format!(
            "{} parameters stored, configuration defines {}",
            header.params.len(),
            ids.len()
        )));
    }
    let mut offset = 20 + len;
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let p = policy.store().get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(bad(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let count = p.value.len();
        let end = offset + count * REAL_BYTES;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| bad(format!("truncated values of `{}`", entry.name)))?;
        let data: Vec<Real> = raw
            .chunks_exact(REAL_BYTES)
            .map(|c| Real::from_le_bytes(c.try_into().expect("chunk width")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value in `{}`", entry.name)));
        }
        *policy.store_mut().value_mut(id) = Tensor::new(entry.shape.clone(), data)?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(policy)
}

pub fn save_checkpoint(policy: &Policy, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &write_checkpoint(policy))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Policy> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
