//! Safetensors checkpoints with a JSON metadata record.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{DepthModel, ModelConfig};
use crate::error::{Error, Result};
use crate::mode::Mode;

pub const CHECKPOINT_SCHEMA: u32 = 1;
const META_KEY: &str = "recdepth";

/// Everything needed to rebuild a model and resume its schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub mode: Mode,
    pub model: ModelConfig,
    pub seed: u64,
    /// Global optimizer steps taken so far.
    pub iteration: u64,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    /// 1 or 2; 0 before training starts.
    pub stage: u8,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub extra: Option<String>,
}

impl CheckpointMeta {
    pub fn for_model(model: &DepthModel) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA,
            mode: model.mode(),
            model: model.config().clone(),
            seed: model.seed(),
            iteration: 0,
            epoch: 0,
            stage: 0,
            config_hash: None,
            extra: None,
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &DepthModel, meta: &CheckpointMeta) -> Result<()> {
    let tensors = model.store().tensors();
    let json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), json)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(info), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(DepthModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: "missing checkpoint metadata".into(),
        })?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if meta.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA})",
            meta.schema_version
        )));
    }
    let config = ModelConfig {
        pretrained: None,
        ..meta.model.clone()
    };
    let model = DepthModel::new(&config, meta.mode, meta.seed, device)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    model.store().load(&tensors, true)?;
    Ok((model, meta))
}
