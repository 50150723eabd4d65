use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ngsan::model::ModelConfig;
use ngsan::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_CONFIG_FILE: &str = "config.json";

/// Everything needed to repeat a run. Written into every run directory and
/// accepted back through `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Subcommand flags that are not part of the model or schedule.
    pub options: BTreeMap<String, Value>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join(RUN_CONFIG_FILE), self)
    }

    pub fn option(&mut self, key: &str, value: impl Serialize) {
        self.options.insert(key.to_string(), serde_json::to_value(value).expect("plain option values"));
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or data, or a failed check: exit 1.
    Invalid(String),
    /// Filesystem trouble: exit 2.
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<ngsan::Error> for CliError {
    fn from(e: ngsan::Error) -> Self {
        match e {
            ngsan::Error::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
