use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lumikit::optim::TrainConfig;
use serde_json::Value;

use crate::UsageError;

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Overlays a (possibly partial) JSON config file on `base`.
pub fn overlay_file(base: TrainConfig, path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text).map_err(|e| UsageError(format!("config {} is not JSON: {e}", path.display())))?;
    let mut v = serde_json::to_value(&base)?;
    merge(&mut v, &over);
    let cfg: TrainConfig =
        serde_json::from_value(v).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn validated(cfg: TrainConfig) -> Result<TrainConfig> {
    cfg.validate().context("invalid training configuration")?;
    Ok(cfg)
}
