use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stm_core::data::SynthConfig;
use stm_core::engine::InferenceConfig;
use stm_core::training::TrainConfig;
use stm_core::{MemoryPolicy, Result, StmError};

use crate::args::{GlobalArgs, PolicyArg};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Contour tolerance in pixels; 0.8% of the image diagonal when unset.
    pub tolerance: Option<f64>,
}

/// Everything a run can be configured with. Each section falls back to
/// its defaults; command-line flags override the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| StmError::io(path, e))?;
        toml::from_str(&text).map_err(|e| StmError::format(path, e.to_string()))
    }

    pub fn resolve(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Some(seed) = global.seed {
            config.seed = seed;
        }
        config.train.seed = config.seed;
        if global.deterministic {
            config.train.deterministic = true;
            config.inference.deterministic = true;
        }
        let interval = match (global.memory_every, config.inference.policy) {
            (Some(n), _) => n,
            (None, MemoryPolicy::Interval(n)) => n,
            (None, _) => 5,
        };
        config.inference.policy = match global.memory_policy {
            Some(PolicyArg::First) => MemoryPolicy::First,
            Some(PolicyArg::Prev) => MemoryPolicy::Previous,
            Some(PolicyArg::FirstPrev) => MemoryPolicy::FirstAndPrevious,
            Some(PolicyArg::Interval) => MemoryPolicy::Interval(interval),
            None if global.memory_every.is_some() => MemoryPolicy::Interval(interval),
            None => config.inference.policy,
        };
        config.inference.policy.validate()?;
        config.train.validate()?;
        config.synth.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("<unprintable: {e}>"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn globals(args: &[&str]) -> GlobalArgs {
        let mut argv = vec!["stm"];
        argv.extend_from_slice(args);
        argv.push("gradcheck");
        crate::args::Cli::parse_from(argv).global
    }

    #[test]
    fn memory_every_implies_the_interval_policy() {
        let c = CliConfig::resolve(&globals(&["--memory-every", "3"])).unwrap();
        assert_eq!(c.inference.policy, MemoryPolicy::Interval(3));
    }

    #[test]
    fn interval_policy_keeps_the_default_spacing() {
        let c = CliConfig::resolve(&globals(&["--memory-policy", "interval"])).unwrap();
        assert_eq!(c.inference.policy, MemoryPolicy::Interval(5));
    }

    #[test]
    fn seed_and_determinism_reach_every_section() {
        let c = CliConfig::resolve(&globals(&["--seed", "9", "--deterministic"])).unwrap();
        assert_eq!((c.seed, c.train.seed), (9, 9));
        assert!(c.train.deterministic && c.inference.deterministic);
    }

    #[test]
    fn zero_interval_is_rejected() {
        assert!(CliConfig::resolve(&globals(&["--memory-every", "0"])).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = CliConfig { seed: 5, ..Default::default() };
        let back: CliConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
