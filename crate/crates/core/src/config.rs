//! Training configuration (JSON, unknown keys rejected).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::SigmaMode;
use crate::error::{CodaError, Result};
use crate::losses::LossWeights;
use crate::nets::{CountingNetConfig, DiscriminatorConfig};
use crate::optim::OptimizerConfig;
use crate::pyramid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Network input `(height, width)`; every crop is resized to it.
    pub input_size: (usize, usize),
    /// Patch side as a fraction of the image side.
    pub patch_fraction: f64,
    /// Pyramid scales below 1; the original patch is always added.
    pub scales: Vec<f64>,
    /// Images per domain per step.
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Generator optimizer, used in both stages at a constant rate.
    pub g_optimizer: OptimizerConfig,
    /// Discriminator optimizer; its rate follows polynomial decay over stage 2.
    pub d_optimizer: OptimizerConfig,
    pub lr_decay_power: f64,
    pub weights: LossWeights,
    pub sigma: SigmaMode,
    pub seed: u64,
    pub counting_net: CountingNetConfig,
    pub discriminator: DiscriminatorConfig,
    /// Steps between evaluation snapshots in stage 2 (0 disables).
    pub eval_every: usize,
    /// Where to write a state dump when a loss or parameter becomes non-finite.
    pub dump_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_size: (128, 128),
            patch_fraction: 0.5,
            scales: vec![0.8, 0.6, 0.4],
            batch_size: 1,
            stage1_steps: 1000,
            stage2_steps: 1000,
            g_optimizer: OptimizerConfig::Sgd { lr: 1e-6 },
            d_optimizer: OptimizerConfig::adam(1e-3),
            lr_decay_power: 0.9,
            weights: LossWeights::default(),
            sigma: SigmaMode::Fixed { sigma: 2.0 },
            seed: 0,
            counting_net: CountingNetConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            eval_every: 100,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the 128×128 synthetic shift experiment: 64×64 patches and
    /// an Adam-driven generator, since a 1e-6 SGD rate does not move a
    /// desk-scale network within a few thousand steps.
    pub fn desk() -> Self {
        TrainConfig {
            input_size: (64, 64),
            patch_fraction: 0.5,
            stage1_steps: 1500,
            stage2_steps: 400,
            g_optimizer: OptimizerConfig::Adam {
                lr: 2e-4,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            ..TrainConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| {
            CodaError::config(
                "config",
                format!("{e} (line {} column {})", e.line(), e.column()),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CodaError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// All pyramid scales, ascending, ending with 1.0.
    pub fn pyramid_scales(&self) -> Vec<f64> {
        pyramid::normalize_scales(&self.scales).expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        self.counting_net.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        self.g_optimizer.validate("g_optimizer")?;
        self.d_optimizer.validate("d_optimizer")?;
        self.sigma
            .validate()
            .map_err(|e| CodaError::config("sigma", e.to_string()))?;
        let (h, w) = self.input_size;
        let stride = self.counting_net.output_stride();
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(CodaError::config(
                "input_size",
                format!("{h}×{w} must be positive and divisible by the output stride {stride}"),
            ));
        }
        let min = self.discriminator.min_input();
        if h < min || w < min {
            return Err(CodaError::config(
                "input_size",
                format!("{h}×{w} is below the discriminator minimum {min}×{min}"),
            ));
        }
        if !(self.patch_fraction > 0.0 && self.patch_fraction <= 1.0) {
            return Err(CodaError::config("patch_fraction", "must lie in (0, 1]"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
            return Err(CodaError::config("scales", "every scale must lie in (0, 1)"));
        }
        if self.scales.windows(2).any(|p| p[0] == p[1]) {
            return Err(CodaError::config("scales", "duplicate scale"));
        }
        if self.batch_size == 0 {
            return Err(CodaError::config("batch_size", "must be ≥ 1"));
        }
        if !(self.lr_decay_power > 0.0 && self.lr_decay_power.is_finite()) {
            return Err(CodaError::config("lr_decay_power", "must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for cfg in [TrainConfig::default(), TrainConfig::desk()] {
            cfg.validate().unwrap();
            assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
        let d = TrainConfig::default();
        assert_eq!(d.pyramid_scales(), vec![0.4, 0.6, 0.8, 1.0]);
        assert_eq!(d.g_optimizer, OptimizerConfig::Sgd { lr: 1e-6 });
        assert_eq!(d.d_optimizer.lr(), 1e-3);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = TrainConfig::from_json(r#"{"stage1_steps": 5, "input_size": [64, 64]}"#).unwrap();
        assert_eq!(cfg.stage1_steps, 5);
        assert_eq!(cfg.input_size, (64, 64));
        assert_eq!(cfg.scales, vec![0.8, 0.6, 0.4]);
    }

    #[test]
    fn unknown_key_names_the_field() {
        let err = TrainConfig::from_json(r#"{"stage1_step": 5}"#).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("stage1_step"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            r#"{"input_size": [30, 64]}"#,
            r#"{"input_size": [16, 16]}"#,
            r#"{"scales": [0.5, 1.0]}"#,
            r#"{"batch_size": 0}"#,
            r#"{"patch_fraction": 0}"#,
            r#"{"weights": {"lambda_disc": -1, "lambda_adv": 0, "lambda_rank": 0, "epsilon": 0}}"#,
            r#"{"sigma": {"fixed": {"sigma": 0}}}"#,
        ] {
            let err = TrainConfig::from_json(text).unwrap_err();
            assert!(err.is_usage(), "{text}: {err}");
        }
    }
}
