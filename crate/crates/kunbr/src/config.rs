//! Versioned JSON run configuration shared by every CLI command. Unknown
//! keys are rejected so typos fail loudly before any work starts.

use crate::error::{Error, Result};
use crate::eval::ExperimentConfig;
use crate::model::ModelConfig;
use crate::pipeline::KunbrConfig;
use crate::unlearn::UnlearnConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n_facts: usize,
    pub forget_fraction: f64,
    pub t_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_facts: 200,
            forget_fraction: 0.25,
            t_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub target_nll: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            batch_size: 32,
            max_steps: 4000,
            target_nll: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub target_acc: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            lr: 1e-3,
            epochs: 200,
            batch_size: 16,
            target_acc: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub unlearn: UnlearnConfig,
    #[serde(default)]
    pub kunbr: KunbrConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            corpus: CorpusSection::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            unlearn: UnlearnConfig::default(),
            kunbr: KunbrConfig::default(),
            attack: AttackSection::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.to_experiment().validate()
    }

    pub fn to_experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            n_facts: self.corpus.n_facts,
            forget_fraction: self.corpus.forget_fraction,
            t_fraction: self.corpus.t_fraction,
            model: self.model.clone(),
            train_lr: self.train.lr,
            train_batch: self.train.batch_size,
            train_max_steps: self.train.max_steps,
            train_target_nll: self.train.target_nll,
            unlearn: self.unlearn.clone(),
            kunbr: self.kunbr.clone(),
            attack_lr: self.attack.lr,
            attack_epochs: self.attack.epochs,
            attack_batch: self.attack.batch_size,
            attack_target_acc: self.attack.target_acc,
        }
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
