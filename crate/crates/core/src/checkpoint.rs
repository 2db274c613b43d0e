//! Versioned checkpoint container.

use crate::config::Config;
use crate::corpus::RelationSet;
use crate::error::{Error, Result};
use crate::lamo::{Codebook, Vocabulary};
use crate::model::{Model, ModelParams};
use crate::nn::ParamStore;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT: &str = "cmggib-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: Config,
    pub relations: RelationSet,
    pub label_names: Vec<String>,
    pub vocab: Vocabulary,
    pub codebook: Codebook,
    pub params: ModelParams,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: model.config.hash(),
            config: model.config.clone(),
            relations: model.relations.clone(),
            label_names: model.label_names.clone(),
            vocab: model.vocab.clone(),
            codebook: model.codebook.clone(),
            params: model.params.clone(),
            store: model.store.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: Checkpoint = serde_json::from_str(text)?;
        if c.format != FORMAT {
            return Err(Error::Format(format!("not a checkpoint (format `{}`)", c.format)));
        }
        if c.version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", c.version)));
        }
        if c.config.hash() != c.config_hash {
            return Err(Error::Format("config hash does not match the stored config".into()));
        }
        c.vocab.reindex();
        Ok(c)
    }

    pub fn into_model(self) -> Result<Model> {
        let n = self.store.len();
        let ids = self
            .params
            .encoder_ids()
            .into_iter()
            .chain(self.params.lamo.ids())
            .chain([self.params.fusion.classifier, self.params.gene.classifier]);
        for id in ids {
            if id.0 >= n {
                return Err(Error::Format(format!("parameter id {} outside store of {n}", id.0)));
            }
        }
        if !self.store.all_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Model::assemble(
            self.config,
            self.relations,
            self.store,
            self.params,
            self.label_names,
            self.vocab,
            self.codebook,
        ))
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model).to_json()?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)?.into_model()
}
