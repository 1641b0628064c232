//! Run configuration: one JSON document covering the model architecture,
//! the optimization schedule, and data locations. Every section rejects
//! unknown keys, so a typo'd hyperparameter fails loudly with the offending
//! key named instead of silently training a different model.

use std::fs;
use std::path::{Path, PathBuf};

use ctn_core::model::ModelConfig;
use ctn_core::train::TrainConfig;
use ctn_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Data locations a config file can carry so commands need fewer flags.
/// The matching command-line flag wins over the file when both are given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
}

/// Everything a run needs. All sections are optional in the document;
/// missing keys take the defaults of the underlying types.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

/// Parse and validate a config document. serde names the offending key in
/// its unknown-field and type errors, which is the error contract here.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("config: {e}")))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_run_config(&text)
}
