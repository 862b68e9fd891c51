//! JSON checkpoints: configuration, seed, adapter strategy, every named
//! parameter tensor with its SHA-256 digest, the trainable set and a short
//! provenance record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use adaptermix_core::model::{AdaptationStrategy, BackboneModel, ModelConfig, TrainableMask};
use adaptermix_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const FORMAT: &str = "adaptermix-checkpoint";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of the tensor's little-endian `f64` values.
pub fn tensor_sha256(t: &Tensor) -> String {
    hex::encode(Sha256::digest(t.to_le_bytes()))
}

pub fn digests(store: &ParamStore) -> BTreeMap<String, String> {
    store
        .iter()
        .map(|(_, name, t)| (name.to_string(), tensor_sha256(t)))
        .collect()
}

/// Digests of the tensors that `mask` leaves frozen.
pub fn frozen_digests(store: &ParamStore, mask: &TrainableMask) -> BTreeMap<String, String> {
    store
        .iter()
        .filter(|(id, _, _)| !mask.is_trainable(*id))
        .map(|(_, name, t)| (name.to_string(), tensor_sha256(t)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Command that wrote the file.
    pub command: String,
    /// Corpus generator seed.
    pub corpus_seed: u64,
    /// Training seed, if the command trained.
    pub train_seed: Option<u64>,
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// Speaker adapted to, for adapted checkpoints.
    pub speaker: Option<usize>,
    pub budget_minutes: Option<usize>,
    /// SHA-256 of the parent checkpoint file.
    pub parent_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub strategy: Option<AdaptationStrategy>,
    /// Names of the tensors trained by the command that wrote the file.
    pub trainable: Vec<String>,
    pub provenance: Provenance,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &BackboneModel, mask: &TrainableMask, provenance: Provenance) -> Self {
        let store = model.store();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            seed: model.seed(),
            strategy: model.strategy().cloned(),
            trainable: store
                .iter()
                .filter(|(id, _, _)| mask.is_trainable(*id))
                .map(|(_, name, _)| name.to_string())
                .collect(),
            provenance,
            tensors: store
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    sha256: tensor_sha256(t),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<BackboneModel> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), Tensor::new(t.shape.clone(), t.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(BackboneModel::restore(
            self.config.clone(),
            self.seed,
            self.strategy.clone(),
            &tensors,
        )?)
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.tensors
            .iter()
            .map(|t| (t.name.clone(), t.sha256.clone()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    /// Reads and validates a checkpoint, recomputing every tensor digest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::format(
                path,
                format!("not a {FORMAT} v{VERSION} file (found {} v{})", ck.format, ck.version),
            ));
        }
        for t in &ck.tensors {
            let tensor = Tensor::new(t.shape.clone(), t.data.clone()).map_err(|e| Error::format(path, e))?;
            if tensor_sha256(&tensor) != t.sha256 {
                return Err(Error::format(path, format!("digest mismatch for tensor `{}`", t.name)));
            }
        }
        Ok(ck)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
