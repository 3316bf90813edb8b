use std::path::Path;

use f2r_autograd::{checkpoint, ParamStore};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn save_model<C: Serialize>(path: &Path, kind: &str, config: &C, params: &ParamStore) -> Result<()> {
    let meta = serde_json::json!({ "kind": kind, "config": config });
    checkpoint::save(path, &meta, params)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`] for a model of type `kind`.
pub(crate) fn load_model<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, ParamStore)> {
    let (meta, store) = checkpoint::load(path)?;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(Error::Config(format!("{} is not a {kind} checkpoint", path.display())));
    }
    let config = serde_json::from_value(meta["config"].clone())?;
    Ok((config, store))
}
