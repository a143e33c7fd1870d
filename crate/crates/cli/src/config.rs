use std::path::{Path, PathBuf};

use novelty_sac::{Corridor, EnvConfig, NoveltyConfig, RecoveryConfig, SacHyper};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a run depends on. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_n_policies")]
    pub n_policies: usize,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub sac: SacHyper,
    #[serde(default)]
    pub novelty: NoveltyConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub recovery: RecoveryConfig,
    #[serde(default)]
    pub experiment: RecoverySettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub episodes: usize,
    pub max_attempts: usize,
    pub fallback: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: 100,
            max_attempts: 64,
            fallback: true,
        }
    }
}

/// Matched-seed recovery experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySettings {
    pub blockades: Vec<Corridor>,
    pub seeds: usize,
    pub first_seed: u64,
}

impl Default for RecoverySettings {
    fn default() -> Self {
        Self {
            blockades: vec![Corridor::Middle],
            seeds: 100,
            first_seed: 0,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_n_policies() -> usize {
    3
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: default_out_dir(),
            n_policies: default_n_policies(),
            env: EnvConfig::default(),
            sac: SacHyper::default(),
            novelty: NoveltyConfig::default(),
            eval: EvalSettings::default(),
            recovery: RecoveryConfig::default(),
            experiment: RecoverySettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        if self.n_policies == 0 {
            return Err(CliError::Config("n_policies: must be at least 1".into()));
        }
        if self.eval.max_attempts == 0 {
            return Err(CliError::Config("eval.max_attempts: must be at least 1".into()));
        }
        novelty_sac::Env::new(self.env.clone())?;
        self.sac.validate()?;
        self.novelty.validate()?;
        self.recovery.validate()?;
        Ok(())
    }

    /// Serialization with the output directory reset to its default, so runs
    /// of one experiment in different directories agree.
    pub fn canonical_toml(&self) -> String {
        RunConfig {
            out_dir: default_out_dir(),
            ..self.clone()
        }
        .to_toml()
    }

    /// SHA-256 prefix of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = RunConfig::from_toml("schema_version = 1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml("schema_version = 1\n[sac]\nalpah = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert!(RunConfig::from_toml("schema_version = 1\nsede = 3\n").is_err());
    }

    #[test]
    fn field_level_validation() {
        let err = RunConfig::from_toml("schema_version = 1\n[sac]\ngamma = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("sac.gamma"), "{err}");
        assert!(RunConfig::from_toml("schema_version = 2\n").is_err());
        assert!(RunConfig::from_toml("schema_version = 1\nn_policies = 0\n").is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.sac.alpha = 0.05;
        cfg.experiment.blockades = vec![Corridor::Middle, Corridor::Left];
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);

        let moved = RunConfig {
            out_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
        let reseeded = RunConfig { seed: 1, ..cfg.clone() };
        assert_ne!(reseeded.hash(), cfg.hash());
    }
}
