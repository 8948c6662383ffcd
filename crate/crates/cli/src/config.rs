use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cadmus_core::SymbolForm;
use serde::{Deserialize, Serialize};

/// Optional defaults read from `--config`. Command-line flags and
/// `CADMUS_SEED` take precedence.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub form: Option<SymbolForm>,
    pub output: Option<PathBuf>,
    pub quiet: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| crate::usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CliConfig {
    pub seed: u64,
    pub form: SymbolForm,
    pub output: PathBuf,
    pub quiet: bool,
    pub config_file: Option<PathBuf>,
    pub command: String,
}
