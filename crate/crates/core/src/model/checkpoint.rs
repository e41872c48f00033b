//! Checkpoint directory: `weights.bin` (safetensors), `arch.json`,
//! `provenance.json`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::Architecture;
use super::nn::{ParamStore, TensorMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: Stage,
    pub parent_hash: Option<String>,
    pub seed: u64,
    pub epoch: usize,
    /// SHA-256 of `weights.bin`; filled in by `save`.
    #[serde(default)]
    pub weights_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub weights: TensorMap,
    pub arch: Architecture,
    pub provenance: Provenance,
}

pub fn save(dir: &Path, store: &ParamStore, arch: &Architecture, provenance: &Provenance) -> Result<Provenance> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let weights: HashMap<String, candle_core::Tensor> = store.tensors().into_iter().collect();
    let path = dir.join("weights.bin");
    candle_core::safetensors::save(&weights, &path)?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut prov = provenance.clone();
    prov.weights_hash = hex::encode(Sha256::digest(&bytes));

    let arch_path = dir.join("arch.json");
    fs::write(&arch_path, serde_json::to_string_pretty(arch)?).map_err(|e| Error::io(&arch_path, e))?;
    let prov_path = dir.join("provenance.json");
    fs::write(&prov_path, serde_json::to_string_pretty(&prov)?).map_err(|e| Error::io(&prov_path, e))?;
    Ok(prov)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let arch: Architecture = serde_json::from_str(&read("arch.json")?)?;
    let provenance: Provenance = serde_json::from_str(&read("provenance.json")?)?;
    let path = dir.join("weights.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    if !provenance.weights_hash.is_empty() && provenance.weights_hash != hash {
        return Err(Error::Checkpoint(format!(
            "{}: weights hash {hash} does not match provenance {}",
            dir.display(),
            provenance.weights_hash
        )));
    }
    let weights: TensorMap = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok(Checkpoint {
        weights,
        arch,
        provenance,
    })
}
