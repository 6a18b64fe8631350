//! JSON run configuration. Every field has a default, so `{}` is valid;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confusion::EcConfig;
use crate::error::{EcamlError, Result};
use crate::experiments::{TrainConfig, RECALL_KS};
use crate::losses::{LossRegistry, LossSpec};
use crate::net::MlpConfig;
use crate::optim::AdamHyper;
use crate::sampling::BatchSpec;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSection {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    /// Defaults to whatever the selected loss requires.
    pub normalize_output: Option<bool>,
}

impl Default for MlpSection {
    fn default() -> Self {
        let d = MlpConfig::desk(1);
        MlpSection {
            hidden_dims: d.hidden_dims,
            embedding_dim: d.embedding_dim,
            normalize_output: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub last_layer_lr_mult: f64,
    pub eval_every: usize,
    pub classes_per_batch: usize,
    pub instances_per_class: usize,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            iterations: t.iterations,
            lr: t.lr,
            weight_decay: t.weight_decay,
            last_layer_lr_mult: t.last_layer_lr_mult,
            eval_every: t.eval_every,
            classes_per_batch: t.batch.classes_per_batch,
            instances_per_class: t.batch.instances_per_class,
            adam: t.adam,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub recall_ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { recall_ks: RECALL_KS.to_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub mlp: MlpSection,
    pub train: TrainSection,
    pub loss: LossSpec,
    pub ec: EcConfig,
    pub data: SynthConfig,
    pub eval: EvalSection,
}

impl RunConfigFile {
    /// Parse and validate. Errors carry the JSON path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            EcamlError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EcamlError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let at = |section: &str, e: EcamlError| EcamlError::Config(format!("at `{section}`: {e}"));
        self.train_config().validate().map_err(|e| at("train", e))?;
        self.ec.validate().map_err(|e| at("ec", e))?;
        self.data.validate().map_err(|e| at("data", e))?;
        self.mlp_config(self.data.input_dim()).validate().map_err(|e| at("mlp", e))?;
        LossRegistry::builtin().create(&self.loss).map_err(|e| at("loss", e))?;
        if self.eval.recall_ks.is_empty() || self.eval.recall_ks.contains(&0) {
            return Err(EcamlError::Config("at `eval.recall_ks`: need at least one K >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            lr: t.lr,
            weight_decay: t.weight_decay,
            last_layer_lr_mult: t.last_layer_lr_mult,
            eval_every: t.eval_every,
            batch: BatchSpec::new(t.classes_per_batch, t.instances_per_class),
            loss: self.loss.clone(),
            ec: Some(self.ec),
            adam: t.adam,
            seed: t.seed,
        }
    }

    pub fn loss_needs_unit_norm(&self) -> bool {
        LossRegistry::builtin()
            .create(&self.loss)
            .map(|l| l.requires_unit_norm())
            .unwrap_or(false)
    }

    /// The network for a dataset of width `input_dim`, seeded like training.
    pub fn mlp_config(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden_dims: self.mlp.hidden_dims.clone(),
            embedding_dim: self.mlp.embedding_dim,
            normalize_output: self.mlp.normalize_output.unwrap_or_else(|| self.loss_needs_unit_norm()),
            seed: self.train.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }
}
