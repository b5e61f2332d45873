//! TOML application config with command-line overrides.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ovtad_core::align::AlignmentConfig;
use ovtad_core::encoder::PyramidConfig;
use ovtad_core::losses::LossWeights;
use ovtad_core::optim::AdamWConfig;
use ovtad_core::postprocess::EvalConfig;

use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub steps: usize,
    /// Whole videos per optimization step.
    pub batch_size: usize,
    /// Linear learning-rate warmup steps.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { steps: 500, batch_size: 4, warmup_steps: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub model: PyramidConfig,
    pub align: AlignmentConfig,
    pub loss: LossWeights,
    pub optim: AdamWConfig,
    pub train: TrainParams,
    pub eval: EvalConfig,
    pub synth: SyntheticSpec,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: AppConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.align.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        // steps == 0 is allowed: the checkpoint then equals initialization
        if self.train.batch_size == 0 {
            anyhow::bail!("train.batch_size must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = AppConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let parsed: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.model.num_levels, cfg.model.num_levels);

        // partial config: unspecified sections fall back to defaults
        let parsed: AppConfig =
            toml::from_str("[model]\nnum_levels = 3\n\n[train]\nsteps = 42\n").unwrap();
        assert_eq!(parsed.model.num_levels, 3);
        assert_eq!(parsed.train.steps, 42);
        assert_eq!(parsed.train.batch_size, TrainParams::default().batch_size);
    }
}
