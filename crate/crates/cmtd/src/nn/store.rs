//! Weight persistence. Files use the `CMTD` record container (see
//! `container`); the manifest carries the architecture hash, build seed,
//! variant, class count, the full spec, and free-form training metadata.
//! Round-trips reproduce forward outputs bit-identically.

use std::path::Path;

use super::{build_model, Model, ModelError, ModelSpec};
use crate::container::{read_container, write_container, Record};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CMTD";
pub const WEIGHTS_VERSION: u16 = 1;

/// Writes the model's parameters and manifest to `path`.
pub fn save_weights(model: &Model, path: &Path) -> Result<(), ModelError> {
    save_weights_with_meta(model, path, serde_json::json!({}))
}

pub fn save_weights_with_meta(
    model: &Model,
    path: &Path,
    meta: serde_json::Value,
) -> Result<(), ModelError> {
    let manifest = serde_json::json!({
        "arch_hash": model.arch_hash(),
        "seed": model.seed(),
        "variant": model.variant(),
        "class_count": model.class_count(),
        "spec": model.spec(),
        "meta": meta,
    });
    let records: Vec<Record> = model
        .params()
        .iter()
        .map(|p| Record {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            values: p.tensor.values().to_vec(),
        })
        .collect();
    write_container(path, WEIGHTS_MAGIC, WEIGHTS_VERSION, &manifest, &records)?;
    Ok(())
}

/// Reads a model back. The manifest's architecture hash must match the
/// hash recomputed from the stored spec, and every parameter the spec
/// implies must be present with its expected shape.
pub fn load_weights(path: &Path) -> Result<Model, ModelError> {
    let (manifest, records) = read_container(path, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
    let spec: ModelSpec = serde_json::from_value(manifest["spec"].clone())
        .map_err(|e| ModelError::MalformedStore(format!("spec field: {e}")))?;
    let stored_hash = manifest["arch_hash"]
        .as_str()
        .ok_or_else(|| ModelError::MalformedStore("missing arch_hash".into()))?;
    let actual = spec.arch_hash();
    if stored_hash != actual {
        return Err(ModelError::ArchHashMismatch {
            stored: stored_hash.to_string(),
            actual,
        });
    }
    let seed = manifest["seed"]
        .as_u64()
        .ok_or_else(|| ModelError::MalformedStore("missing seed".into()))?;

    let mut model = build_model(&spec, seed)?;
    for param in model.params_mut() {
        let record = records
            .iter()
            .find(|r| r.name == param.name)
            .ok_or_else(|| {
                ModelError::MalformedStore(format!("missing parameter record {}", param.name))
            })?;
        if record.shape != param.tensor.shape() {
            return Err(ModelError::MalformedStore(format!(
                "parameter {} shaped {:?}, expected {:?}",
                param.name,
                record.shape,
                param.tensor.shape()
            )));
        }
        param.tensor = crate::tensor::Tensor::new(record.shape.clone(), record.values.clone())?;
    }
    Ok(model)
}

/// Training metadata stored alongside the weights, if any.
pub fn read_meta(path: &Path) -> Result<serde_json::Value, ModelError> {
    let (manifest, _) = read_container(path, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
    Ok(manifest.get("meta").cloned().unwrap_or(serde_json::Value::Null))
}
