//! Weights on disk: safetensors (F64) with the full config in the metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::QueryPropModel;
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 2;

/// Metadata key. A single entry: safetensors takes the metadata as a
/// `HashMap`, so several keys would be written in a random order.
const META_KEY: &str = "qp";

#[derive(Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    config: Config,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(model: &QueryPropModel) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .store
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let mut views = Vec::with_capacity(raw.len());
    for (name, shape, bytes) in &raw {
        let view = TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(|e| bad(e.to_string()))?;
        views.push((name.as_str(), view));
    }
    let meta = Meta { schema_version: CHECKPOINT_SCHEMA_VERSION, config: model.config.clone() };
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).map_err(|e| bad(e.to_string()))?)]);
    safetensors::serialize(views, &Some(meta)).map_err(|e| bad(e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<QueryPropModel> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = meta.metadata().as_ref().ok_or_else(|| bad("missing metadata"))?;
    let text = meta.get(META_KEY).ok_or_else(|| bad(format!("missing metadata key {META_KEY:?}")))?;
    let version: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let version = &version["schema_version"];
    if version.as_u64() != Some(CHECKPOINT_SCHEMA_VERSION.into()) {
        return Err(bad(format!("unsupported schema_version {version}")));
    }
    let Meta { config, .. } = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    config.validate()?;
    let mut model = QueryPropModel::new(&config);
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    if st.len() != model.store.len() {
        return Err(bad(format!("checkpoint has {} tensors, model expects {}", st.len(), model.store.len())));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let view = st.tensor(&name).map_err(|_| bad(format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F64 || view.shape() != model.store.get(id).shape() {
            return Err(bad(format!("tensor {name}: expected F64 {:?}, found {:?} {:?}", model.store.get(id).shape(), view.dtype(), view.shape())));
        }
        let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.store.set(id, Tensor::new(view.shape(), data));
    }
    Ok(model)
}

pub fn save(model: &QueryPropModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<QueryPropModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = Config::tiny();
        let mut model = QueryPropModel::new(&cfg);
        let id = model.store.ids().nth(3).unwrap();
        model.store.get_mut(id).data_mut()[0] = std::f64::consts::PI;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        save(&model, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.detector_checksum(), model.detector_checksum());
        assert_eq!(back.gate_checksum(), model.gate_checksum());
    }

    #[test]
    fn bytes_do_not_depend_on_hash_order() {
        let model = QueryPropModel::new(&Config::tiny());
        let first = to_bytes(&model).unwrap();
        for _ in 0..8 {
            assert_eq!(to_bytes(&model).unwrap(), first);
        }
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::Checkpoint(_))));
    }
}
