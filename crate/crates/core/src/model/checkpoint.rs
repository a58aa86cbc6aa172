use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{param_shapes, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const CONFIG_FILE: &str = "model.json";
pub const PARAMS_JSON: &str = "params.json";
pub const PARAMS_BIN: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: usize,
    sha256: String,
}

/// Writes `model.json`, `params.json` and the little-endian `params.bin` into `dir`.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.num_scalars() * T::BYTES);
    let mut index = BTreeMap::new();
    for (_, name, t) in model.params.iter() {
        let offset = blob.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        index.insert(
            name.to_string(),
            ParamEntry {
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.into(),
                offset,
                sha256: hex::encode(Sha256::digest(&blob[offset..])),
            },
        );
    }
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    let config = serde_json::to_string_pretty(&model.config).expect("serializable config");
    let index = serde_json::to_string_pretty(&index).expect("serializable index");
    write(CONFIG_FILE, config.as_bytes())?;
    write(PARAMS_JSON, index.as_bytes())?;
    write(PARAMS_BIN, &blob)
}

fn read_le_as<T: Scalar>(dtype: &str, bytes: &[u8]) -> Option<Vec<T>> {
    match dtype {
        "f32" => Some(bytes.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect()),
        "f64" => Some(bytes.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect()),
        _ => None,
    }
}

/// Scalar type the checkpoint's parameters were stored in.
pub fn checkpoint_dtype(dir: &Path) -> Result<String> {
    let p = dir.join(PARAMS_JSON);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let index: BTreeMap<String, ParamEntry> =
        serde_json::from_slice(&bytes).map_err(|e| Error::load(&p, "index", e.to_string()))?;
    index
        .into_values()
        .next()
        .map(|e| e.dtype)
        .ok_or_else(|| Error::load(&p, "index", "no parameters"))
}

/// Loads a checkpoint, converting stored values to `T` when dtypes differ.
///
/// Every parameter implied by the stored config must be present with the
/// expected shape and an intact checksum.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let cfg_path = dir.join(CONFIG_FILE);
    let config: ModelConfig = serde_json::from_slice(&read(CONFIG_FILE)?)
        .map_err(|e| Error::load(&cfg_path, "config", e.to_string()))?;
    config.validate()?;
    let idx_path = dir.join(PARAMS_JSON);
    let mut index: BTreeMap<String, ParamEntry> = serde_json::from_slice(&read(PARAMS_JSON)?)
        .map_err(|e| Error::load(&idx_path, "index", e.to_string()))?;
    let blob = read(PARAMS_BIN)?;
    let bin_path = dir.join(PARAMS_BIN);

    let mut params = ParamStore::new();
    for (name, shape) in param_shapes(&config) {
        let entry = index
            .remove(&name)
            .ok_or_else(|| Error::load(&idx_path, &name, "parameter missing"))?;
        if entry.shape != shape {
            return Err(Error::load(
                &idx_path,
                &name,
                format!("shape {:?}, expected {shape:?}", entry.shape),
            ));
        }
        let width = match entry.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::load(&idx_path, &name, format!("unknown dtype {other:?}"))),
        };
        let n: usize = shape.iter().product();
        let end = entry.offset + n * width;
        if end > blob.len() {
            return Err(Error::load(&bin_path, &name, format!("byte range {}..{end} past end {}", entry.offset, blob.len())));
        }
        let bytes = &blob[entry.offset..end];
        if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
            return Err(Error::load(&bin_path, &name, "checksum mismatch"));
        }
        let data = read_le_as(&entry.dtype, bytes).expect("dtype checked");
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if let Some(extra) = index.keys().next() {
        return Err(Error::load(&idx_path, extra, "parameter not used by this config"));
    }
    Ok(Model { config, params })
}
