//! JSON run-configuration files with full defaulting.
//!
//! A config file may set any subset of the knobs below; everything else
//! falls back to the preset defaults. The fully resolved configuration is
//! echoed into the run manifest, so a manifest always describes the exact
//! model and optimizer that produced its artifacts.

use std::path::Path;
use std::str::FromStr;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use spagnn_core::spagnn::Variant;
use spagnn_core::train::{verification_config, LossWeights, ModelConfig, TrainConfig};

/// Named model architecture preset a config file can select.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// Detection branch plus forecaster on the shared feature map.
    Joint,
    /// Forecaster alone, fed ground-truth boxes (ablation-style runs).
    ForecasterOnly,
    /// Small joint model on a coarse grid (fast smoke runs).
    ReducedJoint,
    /// The reduced model with the detection branch stripped.
    ReducedForecasterOnly,
}

impl ModelPreset {
    pub fn model(self, variant: Variant) -> ModelConfig {
        match self {
            ModelPreset::Joint => ModelConfig::joint(variant),
            ModelPreset::ForecasterOnly => ModelConfig::forecaster_only(variant),
            ModelPreset::ReducedJoint => verification_config(variant),
            ModelPreset::ReducedForecasterOnly => {
                let mut config = verification_config(variant);
                config.detection = None;
                config
            }
        }
    }
}

/// On-disk run configuration. Every field is optional; `resolve` applies
/// the preset defaults underneath.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFileConfig {
    pub preset: Option<ModelPreset>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub breakpoints: Option<[usize; 2]>,
    pub weights: Option<LossWeights>,
    /// Fraction of the dataset used for training in `ablate` (the rest is
    /// held out for evaluation). Ignored by `train`.
    pub split: Option<f64>,
}

impl RunFileConfig {
    /// Read a config file, or produce the empty overlay when no path is
    /// given.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunFileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))
            }
        }
    }

    /// Apply this overlay on top of `default_preset` for `variant`,
    /// producing the full model + optimizer configuration.
    pub fn resolve(
        &self,
        default_preset: ModelPreset,
        variant: Variant,
        seed: u64,
    ) -> ResolvedRun {
        let preset = self.preset.unwrap_or(default_preset);
        let model = preset.model(variant);
        let mut train = TrainConfig::toy(variant, seed);
        if model.detection.is_none() {
            train.weights = LossWeights::forecast_only();
        }
        if let Some(lr) = self.lr {
            train.lr = lr;
        }
        if let Some(batch) = self.batch_size {
            train.batch_size = batch;
        }
        if let Some(iters) = self.iterations {
            train.iterations = iters;
        }
        if let Some(bp) = self.breakpoints {
            train.breakpoints = bp;
        }
        if let Some(w) = self.weights {
            train.weights = w;
        }
        ResolvedRun { preset, split: self.split.unwrap_or(0.8), model, train }
    }
}

/// Fully resolved run configuration; serialized into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub preset: ModelPreset,
    /// Training fraction for dataset splits (ablate only).
    pub split: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Parse a variant name, listing the valid spellings on failure.
pub fn parse_variant(name: &str) -> anyhow::Result<Variant> {
    Variant::from_str(name).map_err(|e| anyhow::anyhow!("{e}"))
}
