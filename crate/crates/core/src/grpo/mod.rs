//! Group-relative policy optimization at desk scale.
//!
//! The math lives here: a 2D Gaussian grounding reward, in-group advantage
//! normalization, the clipped surrogate and the batch objective. The
//! [`sampler`] builds action-type-stratified batches and [`toy`] trains a
//! closed-form Gaussian click policy on a synthetic grounding task.

pub mod sampler;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::dataset::{ActionKind, BBox, Point};

pub use sampler::{apportion, stratified_sample, Batch, SamplerConfig};
pub use toy::{
    run_seeded, train_toy, IterationRecord, RewardMode, ToyBatch, ToyEnv, ToyEnvSpec, ToyGroup, ToyInit, ToyPolicy,
    ToyQuery, TrainingLog, DEFAULT_SCALE, FAR_INIT_DISTANCE,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("sigma must be finite and > 0, got {0}")]
    InvalidSigma(f64),
    #[error("a group needs at least 2 outputs, got {0}")]
    GroupTooSmall(usize),
    #[error("objective over an empty batch of groups")]
    EmptyBatch,
    #[error("malformed group: {0}")]
    MalformedGroup(String),
    #[error("target probability for `{0}` is positive but its pool is empty")]
    EmptyStratum(ActionKind),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussRewardConfig {
    pub sigma: f64,
}

impl GaussRewardConfig {
    /// Fallback width when no ground-truth box is known (normalized units).
    pub const FALLBACK_SIGMA: f64 = 0.05;

    pub fn new(sigma: f64) -> Result<Self, GrpoError> {
        let c = Self { sigma };
        c.validate()?;
        Ok(c)
    }

    /// Half the shorter side of the ground-truth box; the fallback width for
    /// a missing or degenerate box.
    pub fn for_box(gt_box: Option<&BBox>) -> Self {
        let sigma = gt_box
            .map(|b| b.width().min(b.height()) / 2.0)
            .filter(|s| s.is_finite() && *s > 0.0)
            .unwrap_or(Self::FALLBACK_SIGMA);
        Self { sigma }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.sigma.is_finite() && self.sigma > 0.0 {
            Ok(())
        } else {
            Err(GrpoError::InvalidSigma(self.sigma))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub epsilon_clip: f64,
    pub delta: f64,
    pub group_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Gradient steps per batch against the same old policy.
    pub inner_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon_clip: 0.2,
            delta: 1e-4,
            group_size: 8,
            learning_rate: 0.01,
            iterations: 500,
            inner_epochs: 4,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::InvalidConfig(m));
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return bad(format!("epsilon_clip must be in (0, 1), got {}", self.epsilon_clip));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return bad(format!("delta must be >= 0, got {}", self.delta));
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if self.inner_epochs == 0 {
            return bad("inner_epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// `exp(-|c - p_gt|^2 / (2 sigma^2))` where `c` is the center of `b_pred`.
pub fn gaussian_reward(b_pred: &BBox, p_gt: Point, cfg: &GaussRewardConfig) -> Result<f64, GrpoError> {
    cfg.validate()?;
    Ok(gaussian_kernel(b_pred.center().distance_sq(p_gt), cfg.sigma))
}

pub(crate) fn gaussian_kernel(dist_sq: f64, sigma: f64) -> f64 {
    (-dist_sq / (2.0 * sigma * sigma)).exp()
}

/// 1 when the center of `b_pred` lies in `gt_box` (boundary included), else 0.
pub fn binary_reward(b_pred: &BBox, gt_box: &BBox) -> f64 {
    if gt_box.contains(b_pred.center(), true) {
        1.0
    } else {
        0.0
    }
}

/// `(r_i - mean) / (std + delta)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], delta: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + delta;
    Ok(rewards
        .iter()
        .map(|r| if denom == 0.0 { 0.0 } else { (r - mean) / denom })
        .collect())
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon_clip, 1.0 + epsilon_clip);
    (ratio * advantage).min(clipped * advantage)
}

/// One query's sampled outputs with their rewards, advantages and current
/// probability ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedGroup {
    pub query: usize,
    pub outputs: Vec<Point>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl RewardedGroup {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let g = self.outputs.len();
        if g < 2 {
            return Err(GrpoError::GroupTooSmall(g));
        }
        if self.rewards.len() != g || self.advantages.len() != g || self.ratios.len() != g {
            return Err(GrpoError::MalformedGroup(format!(
                "query {}: {} outputs, {} rewards, {} advantages, {} ratios",
                self.query,
                g,
                self.rewards.len(),
                self.advantages.len(),
                self.ratios.len()
            )));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(GrpoError::MalformedGroup(format!(
                "query {}: ratio {r} is not positive",
                self.query
            )));
        }
        Ok(())
    }

    fn surrogate_mean(&self, epsilon_clip: f64) -> f64 {
        let sum: f64 = self
            .ratios
            .iter()
            .zip(&self.advantages)
            .map(|(&r, &a)| clipped_surrogate(r, a, epsilon_clip))
            .sum();
        sum / self.ratios.len() as f64
    }
}

/// Mean over groups of the per-group mean clipped surrogate.
pub fn grpo_objective(groups: &[RewardedGroup], cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let mut total = 0.0;
    for g in groups {
        g.validate()?;
        total += g.surrogate_mean(cfg.epsilon_clip);
    }
    Ok(total / groups.len() as f64)
}
