//! Versioned binary container for model checkpoints and prompt/map
//! artifacts: magic, version, a JSON text header, then little-endian f64
//! blocks in declaration order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{Arch, Classifier, LocalModel};
use crate::numeric::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BBAL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write a container: `magic | version | header_len | header JSON |
/// n_blocks | (block_len_u64 | f64...)*`.
pub fn write_container(path: &Path, header: &Value, blocks: &[&[f64]]) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let header_bytes = serde_json::to_vec(header)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for block in blocks {
        f.write_all(&(block.len() as u64).to_le_bytes())?;
        for v in *block {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Value, Vec<Vec<f64>>)> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::InvalidInput(format!(
            "bad checkpoint magic {magic:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    f.read_exact(&mut u32buf)?;
    let header_len = u32::from_le_bytes(u32buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Value = serde_json::from_slice(&header_bytes)?;
    f.read_exact(&mut u32buf)?;
    let n_blocks = u32::from_le_bytes(u32buf) as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut u64buf = [0u8; 8];
    for _ in 0..n_blocks {
        f.read_exact(&mut u64buf)?;
        let len = u64::from_le_bytes(u64buf) as usize;
        let mut block = Vec::with_capacity(len);
        for _ in 0..len {
            f.read_exact(&mut u64buf)?;
            block.push(f64::from_le_bytes(u64buf));
        }
        blocks.push(block);
    }
    Ok((header, blocks))
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

fn params_meta(params: &ParamSet) -> Vec<ParamMeta> {
    params
        .iter()
        .map(|p| ParamMeta {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect()
}

fn params_from_meta(meta: Vec<ParamMeta>, blocks: Vec<Vec<f64>>) -> Result<ParamSet> {
    if meta.len() != blocks.len() {
        return Err(Error::InvalidInput(
            "checkpoint block count does not match header".into(),
        ));
    }
    let mut params = ParamSet::new();
    for (m, block) in meta.into_iter().zip(blocks) {
        params.insert(&m.name, Tensor::new(m.shape, block)?, m.trainable);
    }
    Ok(params)
}

impl Classifier {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "classifier",
            "arch": self.arch(),
            "params": params_meta(self.params()),
        });
        let blocks: Vec<&[f64]> = self.params().iter().map(|p| p.value.data()).collect();
        write_container(path, &header, &blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = read_container(path)?;
        if header["kind"] != "classifier" {
            return Err(Error::InvalidInput("not a classifier checkpoint".into()));
        }
        let arch: Arch = serde_json::from_value(header["arch"].clone())?;
        let meta: Vec<ParamMeta> = serde_json::from_value(header["params"].clone())?;
        Ok(Classifier::from_parts(arch, params_from_meta(meta, blocks)?))
    }
}

impl LocalModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "local_model",
            "input_dim": self.input_dim(),
            "hidden": self.hidden(),
            "head_width": self.head_width(),
            "params": params_meta(self.params()),
        });
        let blocks: Vec<&[f64]> = self.params().iter().map(|p| p.value.data()).collect();
        write_container(path, &header, &blocks)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blocks) = read_container(path)?;
        if header["kind"] != "local_model" {
            return Err(Error::InvalidInput("not a local model checkpoint".into()));
        }
        let input_dim: usize = serde_json::from_value(header["input_dim"].clone())?;
        let hidden: Vec<usize> = serde_json::from_value(header["hidden"].clone())?;
        let head_width: usize = serde_json::from_value(header["head_width"].clone())?;
        let meta: Vec<ParamMeta> = serde_json::from_value(header["params"].clone())?;
        Ok(LocalModel::from_parts(
            input_dim,
            hidden,
            head_width,
            params_from_meta(meta, blocks)?,
        ))
    }
}
