//! RL post-training of a pretrained velocity net: rewards, group-relative advantages and two
//! interchangeable policy objectives.
//!
//! * `awm` — advantage weighted matching: the flow-matching loss on the final samples is the
//!   log-likelihood surrogate, so training never needs the sampling trajectory.
//! * `ddpo` — per-step Gaussian likelihoods of the recorded reverse trajectory with a
//!   PPO-clipped importance ratio per step.

mod awm;
mod ddpo;
mod train;

pub use awm::{
    awm_kl, awm_loglik_surrogate, awm_ratio, draw_shared, AwmObjective, SharedDraw, Weighting,
};
pub use ddpo::{ddpo_step_logprob, DdpoObjective};
pub use train::{rl_train, rl_train_with, RlConfig, RlOutcome, RlRecord, RL_COLUMNS};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Grad, VelocityNet};
use crate::registry::Registry;
use crate::sampler::Trajectory;

/// Desk-scale reward functions of the final sample; all are bounded and deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// 1 inside the closed ball around `center`, else 0.
    ModeIndicator { center: Vec<f64>, radius: f64 },
    /// `exp(-|x - center|^2 / (2 width^2))`.
    GaussianBump { center: Vec<f64>, width: f64 },
    /// 1 on the closed side `<normal, x> >= offset`, else 0.
    Halfplane { normal: Vec<f64>, offset: f64 },
}

impl Default for RewardSpec {
    /// Mode 0 of the `ring-8` preset.
    fn default() -> Self {
        RewardSpec::ModeIndicator {
            center: vec![2.0, 0.0],
            radius: 0.5,
        }
    }
}

impl RewardSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::ModeIndicator { center, .. } | Self::GaussianBump { center, .. } => center.len(),
            Self::Halfplane { normal, .. } => normal.len(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::Config(format!(
                "reward is {}-dimensional but the data is {dim}-dimensional",
                self.dim()
            )));
        }
        match self {
            Self::ModeIndicator { radius, .. } if !(*radius > 0.0) => {
                Err(Error::Config("reward radius must be positive".into()))
            }
            Self::GaussianBump { width, .. } if !(*width > 0.0) => {
                Err(Error::Config("reward width must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Reward of a final sample; the condition label is accepted for interface symmetry.
pub fn compute_reward(x0: &[f64], _c: usize, spec: &RewardSpec) -> f64 {
    let dist2 = |center: &[f64]| -> f64 { x0.iter().zip(center).map(|(x, m)| (x - m).powi(2)).sum() };
    match spec {
        RewardSpec::ModeIndicator { center, radius } => {
            if dist2(center) <= radius * radius {
                1.0
            } else {
                0.0
            }
        }
        RewardSpec::GaussianBump { center, width } => (-dist2(center) / (2.0 * width * width)).exp(),
        RewardSpec::Halfplane { normal, offset } => {
            let dot: f64 = x0.iter().zip(normal).map(|(x, n)| x * n).sum();
            if dot >= *offset {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub const ADVANTAGE_EPS: f64 = 1e-6;

/// `(r_i - mean) / (std + 1e-6)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut adv: Vec<f64> = rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect();
    // remove the rounding residue so the group mean is zero to machine precision
    let resid = adv.iter().sum::<f64>() / n;
    adv.iter_mut().for_each(|a| *a -= resid);
    Ok(adv)
}

/// G final samples sharing one condition.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub condition: usize,
    pub samples: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Present when the objective needs per-step likelihoods.
    pub trajectories: Option<Vec<Trajectory>>,
    /// Iteration whose policy generated the group.
    pub policy_iter: u64,
    pub seed: u64,
}

impl RolloutGroup {
    pub fn new(
        condition: usize,
        samples: Vec<Vec<f64>>,
        spec: &RewardSpec,
        trajectories: Option<Vec<Trajectory>>,
        policy_iter: u64,
        seed: u64,
    ) -> Result<Self> {
        let rewards: Vec<f64> = samples
            .iter()
            .map(|x| compute_reward(x, condition, spec))
            .collect();
        let advantages = group_advantages(&rewards)?;
        Ok(Self {
            condition,
            samples,
            rewards,
            advantages,
            trajectories,
            policy_iter,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One example of an update batch.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: Vec<f64>,
    pub class: usize,
    pub advantage: f64,
    /// Index into the `old` policies of [`ObjectiveContext`].
    pub policy: usize,
    pub trajectory: Option<Trajectory>,
    /// Shared `(t, eps)` pairs used by every likelihood-surrogate evaluation of this sample.
    pub draws: Vec<SharedDraw>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveParams {
    /// PPO clip range; `None` disables clipping.
    pub clip_eps: Option<f64>,
    pub beta: f64,
    pub weighting: Weighting,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            clip_eps: Some(0.2),
            beta: 0.4,
            weighting: Weighting::Uniform,
        }
    }
}

/// Networks an objective is evaluated against.
pub struct ObjectiveContext<'a> {
    pub net: &'a VelocityNet,
    /// Frozen generating policies; `TrainSample::policy` indexes this slice.
    pub old: &'a [&'a VelocityNet],
    pub reference: &'a VelocityNet,
    pub params: ObjectiveParams,
}

/// Scalar diagnostics of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

pub trait PolicyObjective: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_trajectories(&self) -> bool;

    fn loss_and_grad(&self, ctx: &ObjectiveContext<'_>, batch: &[TrainSample]) -> Result<(UpdateStats, Grad)>;
}

pub type ObjectiveFactory = fn(&str) -> Result<Box<dyn PolicyObjective>>;

/// Factories receive the sampler's step-rule name (needed by `ddpo`).
pub fn builtin_objectives() -> Registry<ObjectiveFactory> {
    let mut r: Registry<ObjectiveFactory> = Registry::new("RL objective");
    r.register("awm", |_| Ok(Box::new(AwmObjective)))
        .register("ddpo", |rule| Ok(Box::new(DdpoObjective::new(rule)?)));
    r
}

pub fn objective(name: &str, step_rule: &str) -> Result<Box<dyn PolicyObjective>> {
    (builtin_objectives().get(name)?)(step_rule)
}

/// PPO-style clipped surrogate for one ratio: returns the loss `-min(rho A, clip(rho) A)`,
/// its derivative with respect to `rho`, and whether the clipped branch was selected.
pub(crate) fn clipped_term(rho: f64, adv: f64, clip_eps: Option<f64>) -> (f64, f64, bool) {
    let unclipped = rho * adv;
    match clip_eps {
        None => (-unclipped, -adv, false),
        Some(eps) => {
            let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
            if clipped < unclipped {
                (-clipped, 0.0, true)
            } else {
                (-unclipped, -adv, false)
            }
        }
    }
}
