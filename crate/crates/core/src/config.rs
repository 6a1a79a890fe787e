//! Federation configuration file.
//!
//! TOML, every key optional:
//!
//! ```toml
//! rounds = 60
//! seed = 7
//! roster = ["site1", "site2", "site3"]
//! model = "res=32;classes=4;conv8k3s1,relu,conv16k3s2,relu,conv32k3s2,relu,gap,dense4"
//!
//! [train]
//! batch_size = 32
//! weight_decay = 1e-5
//! finetune_epochs = 30
//! finetune_lr_factor = 0.1
//!
//! [train.schedule]
//! base_lr = 1e-4
//! decay_factor = 0.5
//! decay_every = 100
//!
//! [train.augment]
//! flip_prob = 0.5
//! max_rotation_deg = 45.0
//! intensity_shift_range = 0.1
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ModelSpec;

pub const DEFAULT_ROUNDS: u32 = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: u32,
    pub seed: u64,
    pub roster: Vec<String>,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: DEFAULT_ROUNDS,
            seed: 0,
            roster: (1..=7).map(|i| format!("site{i}")).collect(),
            model: ModelSpec::desk_default(),
            train: TrainConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: FederationConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("at least one round is required".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::InvalidConfig("roster is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for id in &self.roster {
            if id.is_empty() || id.len() > u16::MAX as usize {
                return Err(Error::InvalidConfig(format!("bad client id {id:?}")));
            }
            if !seen.insert(id) {
                return Err(Error::InvalidConfig(format!("client {id} listed twice")));
            }
        }
        self.train.validate()
    }

    /// Hex SHA-256 of the canonical JSON form; covers every field.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
