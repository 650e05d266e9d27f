use std::fs;
use std::path::Path;

use anyhow::Context;
use notegate::deform::DeformationConfig;
use notegate::grid::{FrequencyGrid, TimeGrid};
use notegate::nn::GradCheckConfig;
use notegate::pipeline::{DetectorConfig, DownstreamConfig, SynthConfig, DEFAULT_THRESHOLD};
use serde::{Deserialize, Serialize};

/// Every tunable of every subcommand; `--config` may override any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub time_grid: TimeGrid,
    pub frequency_grid: FrequencyGrid,
    pub synth: SynthConfig,
    pub deformation: DeformationConfig,
    pub detector: DetectorConfig,
    pub threshold: f64,
    pub downstream: DownstreamConfig,
    /// Fraction of corpus tracks reserved for evaluation in `eval`.
    pub eval_test_fraction: f64,
    pub grad_check: GradCheckConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            time_grid: TimeGrid::default(),
            frequency_grid: FrequencyGrid::default(),
            synth: SynthConfig::default(),
            deformation: DeformationConfig::default(),
            detector: DetectorConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            downstream: DownstreamConfig::default(),
            eval_test_fraction: 0.25,
            grad_check: GradCheckConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Routes one seed to every random stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.deformation.rng_seed = seed;
        self.detector.examples.deformation.rng_seed = seed;
        self.detector.split.seed = seed;
        self.detector.train.seed = seed;
        self.downstream.seed = seed;
        self.grad_check.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_configs_fill_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"threshold": 0.3, "detector": {"train": {"epochs": 2}}}"#).unwrap();
        assert_eq!(c.threshold, 0.3);
        assert_eq!(c.detector.train.epochs, 2);
        assert_eq!(c.detector.train.batch_size, 32);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"thresold": 0.3}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"detector": {"examples": {"selection": {"silence_window_v": 40}}}}"#).unwrap();
        assert_eq!(c.detector.examples.selection.silence_window_v, 40);
        assert_eq!(c.detector.examples.selection.window_k, 11);
    }
}
