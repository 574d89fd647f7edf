use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ImputerConfig;
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::store::Archive;

pub const CHECKPOINT_KIND: &str = "imputer-checkpoint";

/// Imputer parameters plus what is needed to reuse them on new data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ImputerConfig,
    pub params: ParamStore,
    /// Epoch the parameters come from; 0 is the initialization.
    pub epoch: usize,
    /// Validation score at `epoch` (held-out MAE, lower is better).
    pub val_metric: Option<f64>,
    pub norm: Option<NormStats>,
    pub features: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ImputerConfig,
    seed: u64,
    epoch: usize,
    val_metric: Option<f64>,
    norm: Option<NormStats>,
    features: Vec<String>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let meta = json!(Meta {
            config: self.config.clone(),
            seed: self.config.seed,
            epoch: self.epoch,
            val_metric: self.val_metric,
            norm: self.norm.clone(),
            features: self.features.clone(),
        });
        Archive::new(CHECKPOINT_KIND, meta, self.params.clone())
    }

    pub fn from_archive(a: Archive, path: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_value(a.meta).map_err(|e| Error::Archive {
            path: path.to_path_buf(),
            message: format!("checkpoint manifest: {e}"),
        })?;
        let expected = super::init_params(&meta.config)?;
        for (name, arr) in expected.iter() {
            let got = a.arrays.get(name).map_err(|_| Error::Archive {
                path: path.to_path_buf(),
                message: format!("missing parameter `{name}`"),
            })?;
            if got.shape() != arr.shape() {
                return Err(Error::Archive {
                    path: path.to_path_buf(),
                    message: format!("`{name}` has shape {:?}, expected {:?}", got.shape(), arr.shape()),
                });
            }
        }
        if a.arrays.len() != expected.len() {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                message: "unexpected extra parameters".into(),
            });
        }
        Ok(Self {
            config: meta.config,
            params: a.arrays,
            epoch: meta.epoch,
            val_metric: meta.val_metric,
            norm: meta.norm,
            features: meta.features,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_archive().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path, CHECKPOINT_KIND)?, path)
    }
}
