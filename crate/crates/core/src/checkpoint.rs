//! Model checkpoints in the MEXT1 container.

use std::path::Path;

use crate::container::{self, Entry};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Param, ParamStore};
use crate::tensor::Scalar;

/// Serializes `store`; `extra` is merged into the header's meta object.
pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, extra: Option<&serde_json::Value>) -> Vec<u8> {
    let mut meta = serde_json::json!({
        "kind": "checkpoint",
        "config": store.config(),
    });
    if let (Some(serde_json::Value::Object(extra)), Some(obj)) = (extra, meta.as_object_mut()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    let entries: Vec<Entry> = store
        .params()
        .iter()
        .map(|p| Entry::from_tensor(&p.name, &p.owner.to_string(), &p.value))
        .collect();
    container::encode(&meta, &entries)
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, extra: Option<&serde_json::Value>) -> Result<()> {
    std::fs::write(path, to_bytes(store, extra)).map_err(|e| Error::io(path, e))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, serde_json::Value)> {
    let (meta, entries) = container::decode(bytes)?;
    let config: ModelConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint config: {e}")))?;
    let params = entries
        .iter()
        .map(|e| {
            Ok(Param {
                name: e.name.clone(),
                owner: e.ownership.parse()?,
                value: e.to_tensor()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ParamStore::from_params(&config, params)?, meta))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Checkpoint(format!("{} does not exist", path.display())),
        _ => Error::io(path, e),
    })?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks that its layout is the one `expected`
/// implies. The seed is not part of the layout.
pub fn load_matching<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<ParamStore<T>> {
    let (store, _) = load::<T>(path)?;
    let mut a = store.config().clone();
    a.seed = expected.seed;
    if a != *expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint layout {:?} does not match configured model {:?}",
            store.config(),
            expected
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 4,
            heads: 1,
            ffn: 6,
            vocab: 10,
            classes: 2,
            max_len: 5,
            seed: 1,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let store = ParamStore::<f32>::init(&cfg()).unwrap();
        let bytes = to_bytes(&store, None);
        let (back, meta) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(meta["kind"], "checkpoint");
        assert_eq!(to_bytes(&back, None), bytes);
    }

    #[test]
    fn layout_mismatch_is_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mext");
        save(&path, &ParamStore::<f32>::init(&cfg()).unwrap(), None).unwrap();
        let other = ModelConfig { hidden: 8, ..cfg() };
        assert!(matches!(load_matching::<f32>(&path, &other), Err(Error::Checkpoint(_))));
        let reseeded = ModelConfig { seed: 99, ..cfg() };
        assert!(load_matching::<f32>(&path, &reseeded).is_ok());
    }
}
