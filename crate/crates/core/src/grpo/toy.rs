//! Synthetic grounding task and a closed-form Gaussian click policy.
//!
//! Each query is a target point inside a square ground-truth box on the unit
//! square. The policy clicks at `N(theta_q, s^2 I)` with a fixed scale `s`,
//! so log-probabilities, ratios and the gradient of the clipped objective
//! are all available in closed form.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    binary_reward, compute_advantages, gaussian_kernel, grpo_objective, stratified_sample, GaussRewardConfig,
    GrpoConfig, GrpoError, RewardedGroup, SamplerConfig,
};
use crate::dataset::{ActionKind, BBox, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Gaussian,
    Binary,
}

impl std::str::FromStr for RewardMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(RewardMode::Gaussian),
            "binary" => Ok(RewardMode::Binary),
            _ => Err(format!("unknown reward mode `{s}` (expected gaussian or binary)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEnvSpec {
    pub n_queries: usize,
    /// Queries drawn per iteration.
    pub batch_queries: usize,
    /// Targets are drawn uniformly from `[lo, hi]^2`.
    pub target_lo: f64,
    pub target_hi: f64,
    /// Half the side of each square ground-truth box.
    pub box_half: f64,
}

impl Default for ToyEnvSpec {
    fn default() -> Self {
        Self {
            n_queries: 16,
            batch_queries: 4,
            target_lo: 0.3,
            target_hi: 0.7,
            box_half: 0.05,
        }
    }
}

impl ToyEnvSpec {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidConfig(m.into()));
        if self.n_queries == 0 || self.batch_queries == 0 {
            return bad("n_queries and batch_queries must be >= 1");
        }
        if self.batch_queries > self.n_queries {
            return bad("batch_queries must not exceed n_queries");
        }
        if !(0.0 <= self.target_lo && self.target_lo < self.target_hi && self.target_hi <= 1.0) {
            return bad("target range must satisfy 0 <= lo < hi <= 1");
        }
        if !(self.box_half > 0.0 && self.box_half.is_finite()) {
            return bad("box_half must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyQuery {
    pub target: Point,
    pub gt_box: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnv {
    pub spec: ToyEnvSpec,
    pub queries: Vec<ToyQuery>,
}

impl ToyEnv {
    pub fn generate(spec: ToyEnvSpec, seed: u64) -> Result<Self, GrpoError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = spec.box_half;
        let queries = (0..spec.n_queries)
            .map(|_| {
                let target = Point::new(
                    rng.random_range(spec.target_lo..=spec.target_hi),
                    rng.random_range(spec.target_lo..=spec.target_hi),
                );
                ToyQuery {
                    target,
                    gt_box: BBox::new(target.x - h, target.y - h, target.x + h, target.y + h),
                }
            })
            .collect();
        Ok(Self { spec, queries })
    }

    pub fn mean_distance(&self, means: &[Point]) -> f64 {
        let sum: f64 = self.queries.iter().zip(means).map(|(q, m)| q.target.distance(*m)).sum();
        sum / self.queries.len() as f64
    }
}

/// Default exploration scale of the click policy.
pub const DEFAULT_SCALE: f64 = 0.1;
/// Default starting distance for far initialization: six box half-widths,
/// where a clicked sample almost never lands in the box.
pub const FAR_INIT_DISTANCE: f64 = 0.3;

/// Per-query click means `theta`, the frozen snapshot `theta_old`, and the
/// fixed exploration scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub means: Vec<Point>,
    pub old_means: Vec<Point>,
    pub scale: f64,
}

impl ToyPolicy {
    pub fn new(means: Vec<Point>, scale: f64) -> Result<Self, GrpoError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "exploration scale must be > 0, got {scale}"
            )));
        }
        Ok(Self {
            old_means: means.clone(),
            means,
            scale,
        })
    }

    /// Starts every query at `distance` from its target in a random direction.
    pub fn far_init(env: &ToyEnv, distance: f64, scale: f64, seed: u64) -> Result<Self, GrpoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = env
            .queries
            .iter()
            .map(|q| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                Point::new(q.target.x + distance * angle.cos(), q.target.y + distance * angle.sin())
            })
            .collect();
        Self::new(means, scale)
    }

    pub fn snapshot(&mut self) {
        self.old_means.clone_from(&self.means);
    }
}

/// One query's outputs and advantages, sampled from the old policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGroup {
    pub query: usize,
    pub old_mean: Point,
    pub outputs: Vec<Point>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// A batch of groups with everything needed to evaluate the objective and
/// its gradient at any `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBatch {
    pub groups: Vec<ToyGroup>,
    pub scale: f64,
    pub epsilon_clip: f64,
}

impl ToyBatch {
    /// `log pi_theta(o) - log pi_old(o)` for the isotropic Gaussian, clamped
    /// so the ratio stays positive and finite after large steps.
    fn log_ratio(&self, o: Point, mean: Point, old_mean: Point) -> f64 {
        ((o.distance_sq(old_mean) - o.distance_sq(mean)) / (2.0 * self.scale * self.scale)).clamp(-700.0, 700.0)
    }

    pub fn rewarded_groups(&self, theta: &[Point]) -> Vec<RewardedGroup> {
        self.groups
            .iter()
            .map(|g| RewardedGroup {
                query: g.query,
                outputs: g.outputs.clone(),
                rewards: g.rewards.clone(),
                advantages: g.advantages.clone(),
                ratios: g
                    .outputs
                    .iter()
                    .map(|&o| self.log_ratio(o, theta[g.query], g.old_mean).exp())
                    .collect(),
            })
            .collect()
    }

    pub fn objective(&self, theta: &[Point]) -> Result<f64, GrpoError> {
        let cfg = GrpoConfig {
            epsilon_clip: self.epsilon_clip,
            ..GrpoConfig::default()
        };
        grpo_objective(&self.rewarded_groups(theta), &cfg)
    }

    /// Analytic gradient of [`ToyBatch::objective`] with respect to every mean.
    ///
    /// For an output on the unclipped branch, `d r_i / d theta_q = r_i (o_i - theta_q) / s^2`;
    /// on the clipped branch the term is constant and contributes nothing.
    pub fn gradient(&self, theta: &[Point]) -> Vec<Point> {
        let mut grad = vec![Point::new(0.0, 0.0); theta.len()];
        let n_groups = self.groups.len() as f64;
        let s2 = self.scale * self.scale;
        for g in &self.groups {
            let mu = theta[g.query];
            let w = 1.0 / (n_groups * g.outputs.len() as f64);
            for (&o, &a) in g.outputs.iter().zip(&g.advantages) {
                let r = self.log_ratio(o, mu, g.old_mean).exp();
                let clipped_active =
                    (a > 0.0 && r > 1.0 + self.epsilon_clip) || (a < 0.0 && r < 1.0 - self.epsilon_clip);
                if clipped_active || a == 0.0 {
                    continue;
                }
                let c = w * a * r / s2;
                grad[g.query].x += c * (o.x - mu.x);
                grad[g.query].y += c * (o.y - mu.y);
            }
        }
        grad
    }

    /// Distance in ratio space from the nearest clipping boundary among the
    /// terms with a nonzero advantage; the objective is not differentiable there.
    pub fn min_kink_distance(&self, theta: &[Point]) -> f64 {
        let mut best = f64::INFINITY;
        for g in &self.groups {
            for (&o, &a) in g.outputs.iter().zip(&g.advantages) {
                if a == 0.0 {
                    continue;
                }
                let r = self.log_ratio(o, theta[g.query], g.old_mean).exp();
                let edge = if a > 0.0 {
                    1.0 + self.epsilon_clip
                } else {
                    1.0 - self.epsilon_clip
                };
                best = best.min((r - edge).abs());
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean distance from each query's click mean to its target, after the update.
    pub mean_distance: f64,
    /// Objective on this iteration's batch after the last inner step.
    pub objective: f64,
    pub reward_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub mode: RewardMode,
    pub seed: u64,
    pub initial_mean_distance: f64,
    pub records: Vec<IterationRecord>,
    pub final_policy: ToyPolicy,
}

impl TrainingLog {
    pub fn final_mean_distance(&self) -> f64 {
        self.records
            .last()
            .map_or(self.initial_mean_distance, |r| r.mean_distance)
    }

    /// `iteration,mean_distance,objective,reward_mean` rows, optionally
    /// prefixed with a seed column.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, header: bool, with_seed: bool) -> std::io::Result<()> {
        if header {
            if with_seed {
                write!(out, "seed,")?;
            }
            writeln!(out, "iteration,mean_distance,objective,reward_mean")?;
        }
        for r in &self.records {
            if with_seed {
                write!(out, "{},", self.seed)?;
            }
            writeln!(
                out,
                "{},{},{},{}",
                r.iteration, r.mean_distance, r.objective, r.reward_mean
            )?;
        }
        Ok(())
    }
}

fn reward(mode: RewardMode, o: Point, q: &ToyQuery, gauss: Option<&GaussRewardConfig>) -> f64 {
    let pred = BBox::at_point(o);
    match mode {
        RewardMode::Binary => binary_reward(&pred, &q.gt_box),
        RewardMode::Gaussian => {
            let sigma = gauss.map_or_else(|| GaussRewardConfig::for_box(Some(&q.gt_box)).sigma, |g| g.sigma);
            gaussian_kernel(o.distance_sq(q.target), sigma)
        }
    }
}

/// Trains `policy` on `env` and logs every iteration.
///
/// Each iteration stratified-samples `batch_queries` queries, draws
/// `group_size` clicks per query from the old policy, scores them, computes
/// advantages, and takes `inner_epochs` gradient-ascent steps on the clipped
/// objective before refreshing the old policy. With `gauss = None` each
/// query's sigma is half the shorter side of its box.
pub fn train_toy(
    env: &ToyEnv,
    mut policy: ToyPolicy,
    mode: RewardMode,
    cfg: &GrpoConfig,
    gauss: Option<&GaussRewardConfig>,
    seed: u64,
) -> Result<TrainingLog, GrpoError> {
    cfg.validate()?;
    env.spec.validate()?;
    if let Some(g) = gauss {
        g.validate()?;
    }
    if policy.means.len() != env.queries.len() || policy.old_means.len() != env.queries.len() {
        return Err(GrpoError::InvalidConfig(format!(
            "policy has {} means for {} queries",
            policy.means.len(),
            env.queries.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = BTreeMap::from([(ActionKind::Click, (0..env.queries.len()).collect::<Vec<usize>>())]);
    let sampler = SamplerConfig::uniform_over(&pool, env.spec.batch_queries);
    let initial = env.mean_distance(&policy.means);
    let mut records = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        policy.snapshot();
        let batch = stratified_sample(&pool, &sampler, rng.next_u64())?;
        let mut groups = Vec::with_capacity(batch.len());
        let mut reward_sum = 0.0;
        for &(_, q) in &batch.items {
            let mu = policy.old_means[q];
            let outputs: Vec<Point> = (0..cfg.group_size)
                .map(|_| {
                    let dx: f64 = StandardNormal.sample(&mut rng);
                    let dy: f64 = StandardNormal.sample(&mut rng);
                    Point::new(mu.x + policy.scale * dx, mu.y + policy.scale * dy)
                })
                .collect();
            let rewards: Vec<f64> = outputs
                .iter()
                .map(|&o| reward(mode, o, &env.queries[q], gauss))
                .collect();
            reward_sum += rewards.iter().sum::<f64>();
            let advantages = compute_advantages(&rewards, cfg.delta)?;
            groups.push(ToyGroup {
                query: q,
                old_mean: mu,
                outputs,
                rewards,
                advantages,
            });
        }
        let toy = ToyBatch {
            groups,
            scale: policy.scale,
            epsilon_clip: cfg.epsilon_clip,
        };
        for _ in 0..cfg.inner_epochs {
            let grad = toy.gradient(&policy.means);
            for (m, g) in policy.means.iter_mut().zip(&grad) {
                m.x += cfg.learning_rate * g.x;
                m.y += cfg.learning_rate * g.y;
            }
        }
        let objective = toy.objective(&policy.means)?;
        records.push(IterationRecord {
            iteration,
            mean_distance: env.mean_distance(&policy.means),
            objective,
            reward_mean: reward_sum / (toy.groups.len() * cfg.group_size) as f64,
        });
    }
    policy.snapshot();
    Ok(TrainingLog {
        mode,
        seed,
        initial_mean_distance: initial,
        records,
        final_policy: policy,
    })
}

/// Initial placement of a seeded run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyInit {
    /// Distance from each query's target to its initial click mean.
    pub distance: f64,
    pub scale: f64,
}

impl Default for ToyInit {
    fn default() -> Self {
        Self {
            distance: FAR_INIT_DISTANCE,
            scale: DEFAULT_SCALE,
        }
    }
}

/// Generates the environment and a far initialization from `seed`, then
/// trains. Runs with the same seed and different reward modes share the
/// environment, the initial policy and the query schedule.
pub fn run_seeded(
    spec: &ToyEnvSpec,
    init: ToyInit,
    mode: RewardMode,
    cfg: &GrpoConfig,
    gauss: Option<&GaussRewardConfig>,
    seed: u64,
) -> Result<TrainingLog, GrpoError> {
    let env = ToyEnv::generate(spec.clone(), seed)?;
    let policy = ToyPolicy::far_init(&env, init.distance, init.scale, seed ^ 0x5eed_0001)?;
    train_toy(&env, policy, mode, cfg, gauss, seed)
}
