//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use planforge_core::grpo::TrainerConfig;
use planforge_core::policy::PolicyConfig;
use planforge_core::recovery::RecoveryConfig;
use planforge_core::toyvlm::ToyVlmConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Stage};
use crate::io::read_bytes;

pub const SEED_ENV: &str = "PLANFORGE_SEED";

/// Probe and calibration set sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub calibration_size: usize,
    pub train_robustness: usize,
    pub train_utility: usize,
    pub heldout_robustness: usize,
    pub heldout_utility: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            calibration_size: 16,
            train_robustness: 32,
            train_utility: 32,
            heldout_robustness: 32,
            heldout_utility: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Simplex grid resolution: weights are multiples of `1 / grid`.
    pub grid: usize,
    /// Sampled plans per preference on top of the mean plan.
    pub samples_per_w: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            samples_per_w: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Index into the preference anchors of the plan that gets applied.
    pub apply_anchor: usize,
    /// Episodes between periodic policy checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            apply_anchor: 2,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Starting model checkpoint; a fresh seeded model when absent.
    /// Relative paths resolve against the config file's directory.
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set, it overrides every per-section seed.
    pub seed: Option<u64>,
    pub model: ToyVlmConfig,
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    pub recovery: RecoveryConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub pipeline: PipelineConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// A few episodes and steps on the default model.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.trainer.episodes = 5;
        c.recovery.steps = 5;
        c.data.train_robustness = 16;
        c.data.train_utility = 16;
        c.data.heldout_robustness = 16;
        c.data.heldout_utility = 16;
        c.sweep.grid = 2;
        c
    }

    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> CliResult<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        if let Some(p) = cfg.paths.model.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| CliError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    fn check_paths(&self) -> CliResult<()> {
        if let Some(p) = &self.paths.model {
            if !p.is_file() {
                return Err(CliError::Config(format!("model path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Distributes a master seed over every section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.model.seed = seed;
        self.policy.seed = seed.wrapping_add(1);
        self.trainer.seed = seed.wrapping_add(2);
        self.recovery.seed = seed.wrapping_add(3);
        self.data.seed = seed.wrapping_add(4);
        self.sweep.seed = seed.wrapping_add(5);
    }

    /// Applies the config's own master seed, then the environment override.
    pub fn resolve_seeds(&mut self) -> CliResult<()> {
        if let Some(s) = self.seed {
            self.apply_seed(s);
        }
        if let Some(s) = env_seed()? {
            self.apply_seed(s);
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        self.recovery.validate(self.model.n_blocks)?;
        let d = &self.data;
        if d.calibration_size == 0 {
            return Err(CliError::Config("calibration size must be positive".into()));
        }
        if d.train_robustness + d.train_utility == 0 {
            return Err(CliError::Config("no training probes".into()));
        }
        if d.heldout_robustness == 0 || d.heldout_utility == 0 {
            return Err(CliError::Config("held-out probes need both tasks".into()));
        }
        if self.sweep.grid == 0 {
            return Err(CliError::Config("sweep grid must be positive".into()));
        }
        if self.pipeline.apply_anchor >= planforge_core::grpo::PREFERENCE_ANCHORS.len() {
            return Err(CliError::Config(format!(
                "apply_anchor {} out of range",
                self.pipeline.apply_anchor
            )));
        }
        Ok(())
    }
}

pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{} must be an unsigned integer, got `{}`", SEED_ENV, v))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Config(format!("{}: {}", SEED_ENV, e))),
    }
}

/// First stage the pipeline runs; earlier stages are assumed done.
pub fn parse_stage(name: &str) -> Option<Stage> {
    Some(match name {
        "calibrate" => Stage::Calibrate,
        "train" => Stage::Train,
        "query" => Stage::Query,
        "sweep" => Stage::Sweep,
        "apply" => Stage::Apply,
        "recover" => Stage::Recover,
        "eval" => Stage::Eval,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_toml_str("[trainer]\nepisodes = 7\n[trainer.mapper]\nkappa = 1.5\n", Path::new(".")).unwrap();
        assert_eq!(cfg.trainer.episodes, 7);
        assert_eq!(cfg.trainer.mapper.kappa, 1.5);
        assert_eq!(cfg.trainer.group_size, 8);
        assert_eq!(cfg.model, ToyVlmConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1\n", "[trainer]\nepisodez = 3\n", "[model]\nwidth = 3\n"] {
            assert!(RunConfig::from_toml_str(text, Path::new(".")).is_err(), "{}", text);
        }
    }

    #[test]
    fn missing_model_path_rejected() {
        let err = RunConfig::from_toml_str("[paths]\nmodel = \"nope.bin\"\n", Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::smoke();
        cfg.apply_seed(9);
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn master_seed_reaches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(100);
        let seeds = [
            cfg.model.seed,
            cfg.policy.seed,
            cfg.trainer.seed,
            cfg.recovery.seed,
            cfg.data.seed,
            cfg.sweep.seed,
        ];
        assert_eq!(seeds, [100, 101, 102, 103, 104, 105]);
    }
}
