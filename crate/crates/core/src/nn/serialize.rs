//! Network file: 8-byte magic, u32 LE header length, JSON header, then every
//! layer's weights followed by its biases as f64 LE.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ArchitectureConfig, Layer, LayerKind, Network, TrainingMeta};
use crate::error::{Error, Result};

pub const NETWORK_MAGIC: &[u8; 8] = b"MBDANET1";
pub const NETWORK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerHeader {
    kind: LayerKind,
    inputs: usize,
    outputs: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: ArchitectureConfig,
    meta: TrainingMeta,
    layers: Vec<LayerHeader>,
}

pub fn network_to_bytes(net: &Network) -> Vec<u8> {
    let header = Header {
        version: NETWORK_VERSION,
        architecture: net.architecture.clone(),
        meta: net.meta.clone(),
        layers: net.layers.iter().map(|l| LayerHeader { kind: l.kind, inputs: l.inputs, outputs: l.outputs }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * net.parameter_count());
    out.extend_from_slice(NETWORK_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for l in &net.layers {
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn network_from_bytes(bytes: &[u8], path: &Path) -> Result<Network> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 12 || &bytes[..8] != NETWORK_MAGIC {
        return Err(bad("not a network file"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
    if header.version != NETWORK_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let mut net = Network::zeros(header.architecture)?;
    let shapes_match = net.layers.len() == header.layers.len()
        && net.layers.iter().zip(&header.layers).all(|(l, h)| l.kind == h.kind && l.inputs == h.inputs && l.outputs == h.outputs);
    if !shapes_match {
        return Err(bad("layer shapes inconsistent with architecture"));
    }
    let blob = &bytes[12 + hlen..];
    if blob.len() != 8 * net.parameter_count() {
        return Err(bad(&format!("expected {} weight bytes, found {}", 8 * net.parameter_count(), blob.len())));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for l in &mut net.layers {
        let Layer { weights, bias, .. } = l;
        for v in weights.iter_mut().chain(bias.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    net.meta = header.meta;
    Ok(net)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, network_to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    network_from_bytes(&bytes, path)
}
