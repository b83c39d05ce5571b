use std::path::{Path, PathBuf};

use equipair::data::TaskKind;
use equipair::model::{Branch, EncoderConfig};
use equipair::train::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Settings of one command after merging the config file and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<TaskKind>,
    pub count: Option<usize>,
    pub n_train: Option<usize>,
    pub branch: Option<Branch>,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub ckpt_b: Option<PathBuf>,
    pub ckpt_a: Option<PathBuf>,
    pub ckpt_joint: Option<PathBuf>,
    pub oracle_gt: bool,
    pub mesh: Option<PathBuf>,
    pub n: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
        self.encoder.validate().map_err(|e| usage(&e))?;
        self.train.validate().map_err(|e| usage(&e))?;
        self.loss.validate().map_err(|e| usage(&e))?;
        Ok(())
    }

    /// Write `run-config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join("run-config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}
