use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "ngsan-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: model.config().clone(),
            params: model
                .params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Load(format!(
                "unsupported checkpoint format `{}` (expected `{CHECKPOINT_FORMAT}`)",
                self.format
            )));
        }
        let mut model = Model::new(self.config, 0)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Load(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for p in self.params {
            let id = model
                .params
                .lookup(&p.name)
                .ok_or_else(|| Error::Load(format!("unexpected parameter `{}`", p.name)))?;
            let slot = model.params.value_mut(id);
            if slot.shape() != p.shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    p.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(p.shape, p.data).map_err(|e| Error::Load(format!("parameter `{}`: {e}", p.name)))?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let doc = serde_json::to_string(&Checkpoint::from_model(model))?;
    std::fs::write(path, doc)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    ck.into_model()
}
