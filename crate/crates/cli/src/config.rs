use std::fs;
use std::path::{Path, PathBuf};

use fogda_core::scene::{DatasetConfig, Split};
use fogda_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "FOGDA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { dataset_dir: PathBuf::from("data"), run_dir: PathBuf::from("runs/default") }
    }
}

/// Which split a run is scored on and whether the teacher is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSelector {
    pub split: Split,
    pub ema: bool,
}

impl Default for ProtocolSelector {
    fn default() -> Self {
        Self { split: Split::TestTarget, ema: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

/// Everything needed to reproduce a run, as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub protocol: ProtocolSelector,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            protocol: ProtocolSelector::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        if config.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "{origin}: unsupported config version {} (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    /// Defaults, overlaid by `path` when given, then by `FOGDA_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            config.train.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.scene.validate().map_err(|e| CliError::Config(format!("dataset.scene: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.ablation.seeds.is_empty() {
            return Err(CliError::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
