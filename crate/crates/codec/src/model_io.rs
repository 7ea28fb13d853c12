//! Checkpoint helpers shared by the learned modules: trainable parameters and
//! frozen buffers live in one container, buffers under a `frozen.` prefix,
//! with the model's config in the metadata blob.

use std::path::Path;

use muc_core::{load_checkpoint, save_checkpoint, ParamStore, Scalar};

use crate::error::{CodecError, Result};

pub const FROZEN_PREFIX: &str = "frozen.";

pub fn save_model<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    buffers: &ParamStore<T>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut merged = ParamStore::new();
    for (name, t) in params.iter() {
        merged.insert(name.clone(), t.clone());
    }
    for (name, t) in buffers.iter() {
        merged.insert(format!("{FROZEN_PREFIX}{name}"), t.clone());
    }
    save_checkpoint(path, &merged, &meta)?;
    Ok(())
}

pub fn load_model<T: Scalar>(
    path: &Path,
) -> Result<(ParamStore<T>, ParamStore<T>, serde_json::Value)> {
    let (merged, meta) = load_checkpoint::<T>(path)?;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for (name, t) in merged.iter() {
        match name.strip_prefix(FROZEN_PREFIX) {
            Some(b) => buffers.insert(b.to_string(), t.clone()),
            None => params.insert(name.clone(), t.clone()),
        }
    }
    Ok((params, buffers, meta))
}

/// Pull a typed config out of checkpoint metadata.
pub fn meta_config<C: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    expected_kind: &str,
) -> Result<C> {
    let kind = meta.get("kind").and_then(|v| v.as_str()).unwrap_or("?");
    if kind != expected_kind {
        return Err(CodecError::CheckpointMismatch(format!(
            "checkpoint kind `{kind}`, expected `{expected_kind}`"
        )));
    }
    let cfg = meta
        .get("config")
        .ok_or_else(|| CodecError::CheckpointMismatch("missing config in metadata".into()))?;
    serde_json::from_value(cfg.clone())
        .map_err(|e| CodecError::CheckpointMismatch(format!("config decode: {e}")))
}
