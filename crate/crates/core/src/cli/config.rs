use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TargetSpec;
use crate::orchestrator::RunConfig;

use super::dataset::DatasetSource;

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// An experiment file: data source, target architecture, loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub target: TargetSpec,
    pub run: RunConfig,
}

/// serde reports missing keys as ``missing field `x` ``; surface them as
/// `missing field: x`.
fn tidy(message: &str) -> String {
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(name) = rest.split('`').next() {
            return format!("missing field: {name}");
        }
    }
    message.trim_end().to_string()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(tidy(e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.target.validate()
    }
}
