use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xaln::downstream::ProbeConfig;
use xaln::train::TrainConfig;

use crate::CliError;

pub const SEED_VAR: &str = "XALN_SEED";

/// The JSON document passed as `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl RunConfig {
    /// Parses, applies the seed override and validates before anything runs.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(xaln::Error::from)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| xaln::Error::InvalidInput(format!("config {}: {e}", path.display())))?;
        if let (Some(seed), Some(train)) = (seed_override()?, cfg.train.as_mut()) {
            train.seed = seed;
        }
        if let Some(train) = &cfg.train {
            train.validate()?;
        }
        cfg.probe.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<&TrainConfig, CliError> {
        self.train.as_ref().ok_or_else(|| xaln::Error::InvalidInput("config has no `train` section".into()).into())
    }
}

pub fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Usage(format!("{SEED_VAR}=`{v}` is not a u64"))),
        Err(_) => Ok(None),
    }
}

/// `XALN_SEED` when set, otherwise `flag`.
pub fn resolve_seed(flag: u64) -> Result<u64, CliError> {
    Ok(seed_override()?.unwrap_or(flag))
}
