//! Checkpoint directories: `manifest.json` plus one raw little-endian blob
//! per parameter and per batchnorm layer (running mean then variance, f64).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Network, NetworkState, UNetConfig};
use crate::error::{Error, Result};
use crate::nn::RunningStats;
use crate::tensor::{DType, Element};

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub name: String,
    pub channels: usize,
    pub initialized: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: DType,
    pub config: UNetConfig,
    pub params: Vec<ParamEntry>,
    pub norms: Vec<NormEntry>,
    /// sha256 over every blob in manifest order.
    pub digest: String,
}

fn param_bytes<T: Element>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

fn stats_bytes(r: &RunningStats) -> Vec<u8> {
    r.mean.iter().chain(&r.var).flat_map(|v| v.to_le_bytes()).collect()
}

/// Content digest of a network's parameters and running statistics.
pub fn network_digest<T: Element>(net: &Network<T>) -> String {
    let state = net.state();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(net.config()).expect("config serializes"));
    for p in &state.params {
        h.update(param_bytes(p));
    }
    for r in &state.running {
        h.update(stats_bytes(r));
    }
    hex::encode(h.finalize())
}

pub fn save_checkpoint<T: Element>(net: &Network<T>, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let state = net.state();
    let mut h = Sha256::new();
    let mut params = Vec::new();
    for (p, values) in net.params().iter().zip(&state.params) {
        let file = format!("{}.bin", p.name());
        let bytes = param_bytes(values);
        h.update(&bytes);
        fs::write(dir.join(&file), &bytes).map_err(|e| Error::io(dir.join(&file), e))?;
        params.push(ParamEntry {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            file,
        });
    }
    let mut norms = Vec::new();
    for (n, r) in net.norms().iter().zip(&state.running) {
        let file = format!("{}.running.bin", n.name);
        let bytes = stats_bytes(r);
        h.update(&bytes);
        fs::write(dir.join(&file), &bytes).map_err(|e| Error::io(dir.join(&file), e))?;
        norms.push(NormEntry {
            name: n.name.clone(),
            channels: n.channels(),
            initialized: r.initialized,
            file,
        });
    }
    let manifest = CheckpointManifest {
        dtype: T::DTYPE,
        config: net.config().clone(),
        params,
        norms,
        digest: hex::encode(h.finalize()),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn read_blob(dir: &Path, file: &str, expected: usize) -> Result<Vec<u8>> {
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            path,
            expected: expected as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Loads a checkpoint written by [`save_checkpoint`] with the same element type.
pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<(Network<T>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint holds {:?} parameters, expected {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let mut net = Network::<T>::build(manifest.config.clone(), 0)?;
    if manifest.params.len() != net.params().len() || manifest.norms.len() != net.norms().len() {
        return Err(Error::Data("checkpoint does not match its config's topology".into()));
    }
    let mut h = Sha256::new();
    let mut params = Vec::new();
    for (entry, p) in manifest.params.iter().zip(net.params().iter()) {
        if entry.name != p.name() || entry.shape != p.shape() {
            return Err(Error::Data(format!("checkpoint entry {} does not match {}", entry.name, p.name())));
        }
        let n: usize = entry.shape.iter().product();
        let bytes = read_blob(dir, &entry.file, n * T::BYTES)?;
        h.update(&bytes);
        params.push(bytes.chunks_exact(T::BYTES).map(T::read_le).collect());
    }
    let mut running = Vec::new();
    for entry in &manifest.norms {
        let bytes = read_blob(dir, &entry.file, entry.channels * 16)?;
        h.update(&bytes);
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        running.push(RunningStats {
            mean: vals[..entry.channels].to_vec(),
            var: vals[entry.channels..].to_vec(),
            initialized: entry.initialized,
        });
    }
    if hex::encode(h.finalize()) != manifest.digest {
        return Err(Error::Data(format!("checkpoint {} fails its digest check", dir.display())));
    }
    net.load_state(&NetworkState { params, running })?;
    Ok((net, manifest))
}
