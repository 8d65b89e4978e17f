use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mdrg_core::data::SyntheticWorldConfig;
use mdrg_core::pipeline::TrainingConfig;
use serde::{Deserialize, Serialize};

pub const HOME_ENV: &str = "MDRG_HOME";

/// Everything a `--config` file may set. Missing fields take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub home: Option<PathBuf>,
    pub synthetic: SyntheticWorldConfig,
    pub training: TrainingConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// `--home`, then the config file, then `$MDRG_HOME`, then `./mdrg_home`.
    pub fn home(&self, flag: Option<&Path>) -> Home {
        let root = flag
            .map(Path::to_path_buf)
            .or_else(|| self.home.clone())
            .or_else(|| std::env::var_os(HOME_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("mdrg_home"));
        Home { root }
    }
}

/// Layout of the model and data root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Home {
    pub root: PathBuf,
}

impl Home {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    /// The run checkpoint every training stage reads and updates.
    pub fn run_checkpoint(&self) -> PathBuf {
        self.checkpoints().join("run.ckpt")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("logs").join("metrics.jsonl")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn generated(&self) -> PathBuf {
        self.root.join("generated")
    }
}
