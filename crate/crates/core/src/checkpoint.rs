//! Weight bundles: one TSR1 file per parameter plus a JSON index, and SHA-256
//! helpers for manifests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tensorcore::{io as tsr, ParamSet};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of every parameter's name, shape and payload.
pub fn params_hash(params: &ParamSet<f32>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, value) in params.names().iter().zip(params.values()) {
        h.update(name.as_bytes());
        h.update(tsr::encode(value)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightIndex {
    params: Vec<String>,
    hash: String,
    meta: serde_json::Value,
}

/// Write `params` under `dir` with free-form metadata.
pub fn save_params(dir: &Path, params: &ParamSet<f32>, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, value) in params.values().iter().enumerate() {
        tsr::save(dir.join(format!("{i:03}.tsr")), value)?;
    }
    let index = WeightIndex { params: params.names().to_vec(), hash: params_hash(params)?, meta };
    fs::write(dir.join("weights.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(())
}

/// Read metadata written by [`save_params`].
pub fn load_meta(dir: &Path) -> Result<serde_json::Value> {
    let index: WeightIndex = serde_json::from_str(&fs::read_to_string(dir.join("weights.json"))?)?;
    Ok(index.meta)
}

/// Fill an already constructed `params` (same architecture) from `dir`.
pub fn load_params(dir: &Path, params: &mut ParamSet<f32>) -> Result<()> {
    let index: WeightIndex = serde_json::from_str(&fs::read_to_string(dir.join("weights.json"))?)?;
    if index.params != params.names() {
        return Err(Error::Format(format!(
            "weight bundle {} does not match the model: {} stored parameters vs {} expected",
            dir.display(),
            index.params.len(),
            params.len()
        )));
    }
    let values = (0..params.len()).map(|i| tsr::load(dir.join(format!("{i:03}.tsr")))).collect::<tensorcore::Result<Vec<_>>>()?;
    params.assign(values)?;
    if params_hash(params)? != index.hash {
        return Err(Error::Format(format!("weight bundle {} fails its hash check", dir.display())));
    }
    Ok(())
}
