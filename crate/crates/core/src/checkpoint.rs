//! JSON checkpoints holding everything needed to resume a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::drawing::{ClassInfo, ClassVocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{AdamW, TensorRecord};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub config: RunConfig,
    pub vocab: Vec<ClassInfo>,
    pub params: BTreeMap<String, TensorRecord>,
    pub buffers: BTreeMap<String, TensorRecord>,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &AdamW, rng: &ChaCha8Rng, epoch: usize) -> Self {
        Self {
            format: FORMAT_VERSION,
            epoch,
            config: model.config.clone(),
            vocab: model.vocab.classes().to_vec(),
            params: model.store.to_records(),
            buffers: model.buffers(),
            optimizer: optimizer.clone(),
            rng: rng.clone(),
        }
    }

    pub fn vocab(&self) -> Result<ClassVocab> {
        ClassVocab::new(self.vocab.clone())
    }

    /// Rebuilds the model described by this checkpoint.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config, &self.vocab()?)?;
        model.store.load_records(&self.params).map_err(Error::Checkpoint)?;
        model.load_buffers(&self.buffers)?;
        Ok(model)
    }

    /// Canonical serialization of the parameter tensors alone.
    pub fn params_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.params)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                ck.format
            )));
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file first so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
