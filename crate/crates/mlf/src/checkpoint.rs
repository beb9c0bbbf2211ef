//! JSON checkpoint: model config, normalisation statistics and every named
//! tensor (name, shape, row-major data).

use std::path::Path;

use mlf_core::data::Standardizer;
use mlf_core::nn::ParamStore;
use mlf_core::{MlfConfig, MlfModel};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const FORMAT: &str = "mlf-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: MlfConfig,
    pub standardizer: Standardizer,
    pub channels: Vec<String>,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &MlfModel, standardizer: &Standardizer, channels: &[String]) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            standardizer: standardizer.clone(),
            channels: channels.to_vec(),
            params: model.params.clone(),
            buffers: model.buffers.clone(),
        }
    }

    pub fn model(&self) -> Result<MlfModel> {
        Ok(MlfModel::from_parts(self.config.clone(), &self.params, &self.buffers)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| AppError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(AppError::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            });
        }
        Ok(ck)
    }
}
