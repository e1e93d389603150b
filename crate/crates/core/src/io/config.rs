//! TOML run configuration.
//!
//! ```toml
//! seeds = [0, 1, 2]
//! input = "data.pfs1"
//! output = "out/result.json"
//!
//! [hyper]
//! k = 10
//! lambda = 10.0
//!
//! [sim]
//! n_per_class = 200
//! ```
//!
//! Every key is optional and unknown keys are rejected. Missing sections take
//! the `Hyperparams` and `SimConfig` defaults; `seeds` defaults to `[0]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::feature_model::Hyperparams;
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub seeds: Vec<u64>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub hyper: Hyperparams,
    pub sim: SimConfig,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            input: None,
            output: None,
            hyper: Hyperparams::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RunConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn check(&self) -> Result<()> {
        self.hyper.check()?;
        self.sim.check()
    }
}
