use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpt_core::RunConfig;
use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = concat!("cpt ", env!("CARGO_PKG_VERSION"));

/// Files written by one run, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOutputs {
    pub trajectory_csv: PathBuf,
    pub trajectory_json: PathBuf,
    pub checkpoint: PathBuf,
}

/// Everything needed to repeat a run: the resolved config and the version of
/// the tool that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub outputs: RunOutputs,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(config: RunConfig, outputs: RunOutputs) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            seed: config.seed,
            config,
            outputs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).context("malformed run manifest")?;
        if m.seed != m.config.seed {
            bail!("manifest seed {} disagrees with config seed {}", m.seed, m.config.seed);
        }
        m.config.validate_for_engine()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("loading {}", path.display()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_exactly() {
        let mut config = RunConfig::toy();
        config.seed = 17;
        config.schedule.eta_max = 0.1 + 0.2;
        config.model.tau_init = 1.0 / 3.0;
        let m = RunManifest::new(
            config,
            RunOutputs {
                trajectory_csv: "trajectory.csv".into(),
                trajectory_json: "trajectory.json".into(),
                checkpoint: "final.ckpt".into(),
            },
        );
        let back = RunManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config.schedule.eta_max.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn mismatched_seed_is_rejected() {
        let mut m = RunManifest::new(
            RunConfig::toy(),
            RunOutputs {
                trajectory_csv: "a".into(),
                trajectory_json: "b".into(),
                checkpoint: "c".into(),
            },
        );
        m.seed = 1;
        assert!(RunManifest::from_json(&m.to_json()).is_err());
    }
}
