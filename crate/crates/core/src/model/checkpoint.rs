//! Checkpoint = JSON manifest at `path` + little-endian f32 blob at `<path>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

const FORMAT: &str = "puyun-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    dtype: DType,
    seed: u64,
    parameters: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    /// Seed the parameters were created (or trained) with.
    pub seed: u64,
}

fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn encode(ckpt: &Checkpoint) -> Result<(Vec<u8>, Vec<u8>)> {
    ckpt.params.check(&ckpt.config)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: ckpt.config.clone(),
        dtype: DType::F32,
        seed: ckpt.seed,
        parameters: ckpt
            .params
            .iter()
            .map(|(p, t)| Entry {
                path: p.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    let mut blob = Vec::with_capacity(ckpt.params.n_elements() * 4);
    for (_, t) in ckpt.params.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok((text, blob))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let (manifest, blob) = encode(ckpt)?;
    fs::write(path, manifest)?;
    fs::write(blob_path(path), blob)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
    };
    let manifest: Manifest = serde_json::from_slice(&read(path)?)
        .map_err(|e| Error::Data(format!("bad checkpoint manifest {}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.dtype != DType::F32 {
        return Err(Error::Data("only f32 checkpoints are supported".into()));
    }
    let blob = read(&blob_path(path))?;
    let total: usize = manifest
        .parameters
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 4 {
        return Err(Error::Data(format!(
            "checkpoint blob has {} bytes, manifest implies {}",
            blob.len(),
            total * 4
        )));
    }
    let mut offset = 0;
    let mut tensors = IndexMap::new();
    for e in manifest.parameters {
        let n: usize = e.shape.iter().product();
        let data = blob[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
            .collect();
        offset += n * 4;
        tensors.insert(e.path, Tensor::new(e.shape, data).map_err(|e| Error::Data(e.to_string()))?);
    }
    let params = Parameters::from_map(tensors);
    params
        .check(&manifest.config)
        .map_err(|e| Error::Data(format!("checkpoint does not match its config: {e}")))?;
    Ok(Checkpoint {
        config: manifest.config,
        params,
        seed: manifest.seed,
    })
}

/// SHA-256 over the manifest bytes followed by the blob bytes, as hex.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(path)?);
    h.update(fs::read(blob_path(path))?);
    Ok(hex::encode(h.finalize()))
}
