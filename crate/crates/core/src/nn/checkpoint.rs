//! Checkpoint files: `u64` little-endian header length, a JSON header, then
//! every tensor as little-endian `f32` in layer order (weights and biases,
//! then batch-norm running mean and variance where present).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::adam::AdamConfig;
use super::layers::{Layer, LayerSpec};
use super::network::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    #[serde(flatten)]
    pub config: AdamConfig,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
    pub provenance: serde_json::Value,
    pub rng_seed: u64,
    pub adam: AdamScalars,
    /// Free-form caller metadata.
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn tensor_list(net: &Network<f32>) -> Vec<(String, &Vec<f32>)> {
    let mut out = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        let k = l.kind();
        match l {
            Layer::Conv2d(c) => {
                out.push((format!("layer{i}.{k}.weight"), &c.weight));
                out.push((format!("layer{i}.{k}.bias"), &c.bias));
            }
            Layer::Dense(d) => {
                out.push((format!("layer{i}.{k}.weight"), &d.weight));
                out.push((format!("layer{i}.{k}.bias"), &d.bias));
            }
            Layer::BatchNorm(b) => {
                out.push((format!("layer{i}.{k}.gamma"), &b.gamma));
                out.push((format!("layer{i}.{k}.beta"), &b.beta));
                out.push((format!("layer{i}.{k}.running_mean"), &b.running_mean));
                out.push((format!("layer{i}.{k}.running_var"), &b.running_var));
            }
            _ => {}
        }
    }
    out
}

fn tensor_list_mut(net: &mut Network<f32>) -> Vec<&mut Vec<f32>> {
    let mut out = Vec::new();
    for l in net.layers.iter_mut() {
        match l {
            Layer::Conv2d(c) => out.extend([&mut c.weight, &mut c.bias]),
            Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
            Layer::BatchNorm(b) => out.extend([&mut b.gamma, &mut b.beta, &mut b.running_mean, &mut b.running_var]),
            _ => {}
        }
    }
    out
}

/// Serializes `net` with the given header fields; `tensors` and `layers`
/// are filled in from the network.
pub fn encode(net: &Network<f32>, header: &CheckpointHeader) -> Result<Vec<u8>> {
    let list = tensor_list(net);
    let mut h = header.clone();
    h.input_shape = net.input_shape.clone();
    h.layers = net.specs.clone();
    h.tensors = list
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            len: t.len(),
        })
        .collect();
    let json = serde_json::to_vec(&h)?;
    let total: usize = list.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 4 * total);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &list {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Rebuilds the network described by a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Network<f32>)> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated length prefix"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?);
    let header: CheckpointHeader = serde_json::from_slice(body.ok_or_else(|| bad("truncated header"))?)?;
    let mut net = Network::<f32>::new(&header.input_shape, &header.layers, 0)?;
    let mut blob = &bytes[8 + hlen..];
    {
        let names: Vec<(String, usize)> = tensor_list(&net).into_iter().map(|(n, t)| (n, t.len())).collect();
        if names.len() != header.tensors.len()
            || names.iter().zip(&header.tensors).any(|((n, l), e)| *n != e.name || *l != e.len)
        {
            return Err(bad("tensor table does not match the layer list"));
        }
    }
    for t in tensor_list_mut(&mut net) {
        let need = 4 * t.len();
        if blob.len() < need {
            return Err(bad("truncated parameter blob"));
        }
        for (v, b) in t.iter_mut().zip(blob[..need].chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
        blob = &blob[need..];
    }
    if !blob.is_empty() {
        return Err(bad("trailing bytes after parameter blob"));
    }
    Ok((header, net))
}

pub fn save(path: &Path, net: &Network<f32>, header: &CheckpointHeader) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(net, header)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Network<f32>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
