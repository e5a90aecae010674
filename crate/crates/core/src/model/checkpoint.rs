use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model: configuration plus every named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            params: model
                .params()
                .iter()
                .map(|(name, t)| SavedParam {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                self.version, CHECKPOINT_VERSION
            )));
        }
        let mut model = Model::new(self.config)?;
        if self.params.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors but the configuration defines {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for p in self.params {
            let id = model
                .params()
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", p.name)))?;
            let t = model.params_mut().get_mut(id);
            if t.shape() != p.shape.as_slice() || p.data.len() != t.numel() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} but the configuration expects {:?}",
                    p.name,
                    p.shape,
                    t.shape()
                )));
            }
            if p.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!("parameter {} has non-finite values", p.name)));
            }
            t.data_mut().copy_from_slice(&p.data);
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::from_model(model))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))?;
    ck.into_model()
}
