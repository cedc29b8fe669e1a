//! Self-describing checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                    |
//! |----------------|--------------------------------------------|
//! | `0..4`         | magic `GPCK`                               |
//! | `4..8`         | format version, `u32` (currently 1)        |
//! | `8..16`        | header length `H` in bytes, `u64`          |
//! | `16..16+H`     | UTF-8 JSON header                          |
//! | `16+H..`       | parameter blob, `f64` values               |
//!
//! The JSON header holds the model spec, free-form metadata (run config,
//! vocabulary) and a manifest entry per parameter tensor with its layer,
//! name, shape, and element offset into the blob. Tensors are stored
//! back to back in layer order, each in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelSpec,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub fn encode(net: &Network, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut offset = 0;
    for (l, (desc, ts)) in net.layers.iter().zip(&net.params).enumerate() {
        for (p, t) in desc.params.iter().zip(ts) {
            params.push(ManifestEntry {
                layer: l,
                name: p.name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
    }
    let header = Header {
        model: net.spec.clone(),
        meta: meta.clone(),
        params,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.params.iter().flatten() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Network, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let h = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(h))
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let blob = &bytes[16 + h..];
    if !blob.len().is_multiple_of(8) {
        return Err(Error::Format("checkpoint blob is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let layers = header.model.layers();
    let mut params: Vec<Vec<Tensor>> = vec![Vec::new(); layers.len()];
    let mut expected_offset = 0;
    for e in &header.params {
        if e.offset != expected_offset {
            return Err(Error::Format(format!("manifest offset {} out of order", e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Format(format!("blob too short for {}", e.name)))?;
        let slot = params
            .get_mut(e.layer)
            .ok_or_else(|| Error::Format(format!("manifest layer {} out of range", e.layer)))?;
        slot.push(Tensor::new(e.shape.clone(), data.to_vec())?);
        expected_offset += n;
    }
    if expected_offset != values.len() {
        return Err(Error::Format(format!(
            "blob holds {} values, manifest describes {expected_offset}",
            values.len()
        )));
    }
    let net = Network::from_params(header.model, params)?;
    Ok((net, header.meta))
}

pub fn save(path: &Path, net: &Network, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(net, meta)?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(Network, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}
