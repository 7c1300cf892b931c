//! Single JSON configuration file for every command. Missing sections and keys
//! take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AssignmentConfig;
use crate::context::ContextTextureConfig;
use crate::data::{AugmentConfig, GeneratorConfig};
use crate::error::{Error, Result};
use crate::eval::InferenceConfig;
use crate::heads::HeadConfig;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::pyramid::BackboneConfig;
use crate::train::{TrainConfig, Trainer};
use crate::par::Execution;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub backbone: BackboneConfig,
    pub context: ContextTextureConfig,
    pub head: HeadConfig,
    pub assignment: AssignmentConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub generator: GeneratorConfig,
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CliConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the validated defaults when it is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text)
            }
            None => {
                let cfg = Self::default();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            context: self.context.clone(),
            head: self.head.clone(),
            assignment: self.assignment.clone(),
        }
    }

    pub fn trainer(&self, exec: Execution) -> Trainer {
        Trainer {
            model: self.model(),
            loss: self.loss.clone(),
            augment: self.augment.clone(),
            train: self.train.clone(),
            exec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.generator.validate()?;
        if self.augment.output_size != self.backbone.input_size {
            return Err(Error::Config(format!(
                "augment.output_size {} must equal backbone.input_size {}",
                self.augment.output_size, self.backbone.input_size
            )));
        }
        Ok(())
    }
}
