//! JSON run configuration files and command-line overrides.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sim::EnvKind;
use crate::train::TrainConfig;

/// Values supplied on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub env: Option<EnvKind>,
    pub seed: Option<u64>,
    pub total_steps: Option<u64>,
    pub gamma: Option<f64>,
    /// Output directory; sets `metrics.csv` and `checkpoint.nafc` inside it.
    pub out: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.nafc";

/// Parses a run config document. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let key = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
            .unwrap_or("config")
            .to_string();
        Error::config(key, msg)
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::config(
            "config",
            if e.kind() == std::io::ErrorKind::NotFound {
                format!("config not found: {}", path.display())
            } else {
                format!("cannot read config {}: {e}", path.display())
            },
        )
    })?;
    parse_config(&text)
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(env) = self.env {
            cfg.env = env;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.total_steps {
            cfg.total_steps = n;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(dir) = &self.out {
            cfg.metrics_path = Some(dir.join(METRICS_FILE));
            cfg.checkpoint_path = Some(dir.join(CHECKPOINT_FILE));
        }
    }
}

/// Defaults, then the optional file, then overrides; validated.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
