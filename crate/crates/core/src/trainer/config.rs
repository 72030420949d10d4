//! Run configuration, serialized as TOML.

use std::path::Path;

use sags_tensor::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::model::{Ablations, ModelConfig};
use crate::{Result, SagsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowPruneConfig {
    pub start: usize,
    pub end: usize,
    pub interval: usize,
    /// Mean screen-space gradient norm (normalized device units) that triggers cloning.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Clone offset as a fraction of the parent's mean neighbor distance.
    pub jitter: f64,
    /// Growing stops once this many Gaussians are rendered (stored points plus
    /// Lite midpoints).
    pub max_points: usize,
}

impl Default for GrowPruneConfig {
    fn default() -> Self {
        Self {
            start: 1500,
            end: 15000,
            interval: 100,
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            jitter: 0.1,
            max_points: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub features: f64,
    pub features_final: f64,
    pub mlp: f64,
    pub mlp_final: f64,
    pub hash: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            features: 2e-3,
            features_final: 2e-4,
            mlp: 2e-3,
            mlp_final: 2e-4,
            hash: 1e-2,
        }
    }
}

/// Exponential interpolation from `start` to `end` over `[0, 1]`.
pub fn exp_decay(start: f64, end: f64, progress: f64) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    (start.ln() * (1.0 - t) + end.ln() * t).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub seed: u64,
    pub background: [f32; 3],
    /// Training-view PSNR is logged every this many iterations (and at the end).
    pub psnr_every: usize,
    pub grow: GrowPruneConfig,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub ablations: Ablations,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lambda: 0.2,
            seed: 0,
            background: [0.0; 3],
            psnr_every: 100,
            grow: GrowPruneConfig::default(),
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            ablations: Ablations::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short desk-scale run: 2000 iterations with the grow/prune window
    /// compressed proportionally.
    pub fn toy() -> Self {
        Self {
            iterations: 2000,
            grow: GrowPruneConfig {
                start: 500,
                end: 1500,
                max_points: 3000,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SagsError::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        let g = &self.grow;
        if !(g.start < g.end && g.end <= self.iterations) {
            return Err(SagsError::Config(format!(
                "grow/prune window needs start < end <= iterations, got {}..{} with {} iterations",
                g.start, g.end, self.iterations
            )));
        }
        if g.interval == 0 {
            return Err(SagsError::Config("grow/prune interval must be positive".into()));
        }
        let lr = &self.lr;
        if [lr.features, lr.features_final, lr.mlp, lr.mlp_final, lr.hash].iter().any(|&v| !(v > 0.0)) {
            return Err(SagsError::Config("learning rates must be positive".into()));
        }
        if self.psnr_every == 0 {
            return Err(SagsError::Config("psnr_every must be positive".into()));
        }
        self.model.validate()
    }

    /// Whether a grow/prune step runs after `iteration` (1-based).
    pub fn grow_prune_due(&self, iteration: usize) -> bool {
        let g = &self.grow;
        iteration >= g.start && iteration <= g.end && iteration % g.interval == 0
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SagsError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| SagsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SagsError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| SagsError::io(path, e))
    }
}
