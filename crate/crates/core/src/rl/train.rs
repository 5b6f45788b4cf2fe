//! The outer RL loop: sample groups, score them, update, repeat.
//!
//! With `off_policy_fraction = f > 0` every iteration after the first also trains on
//! `ceil(f B)` samples drawn without replacement from the previous iteration's fresh batch;
//! those keep their advantages and use the previous policy as `theta_old`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    builtin_objectives, draw_shared, objective, ObjectiveContext, ObjectiveParams, RewardSpec,
    RolloutGroup, TrainSample, Weighting,
};
use crate::error::{Error, Result};
use crate::net::{Adam, VelocityNet};
use crate::pretrain::TimestepSampler;
use crate::sampler::{builtin_step_rules, rollout_batch, step_rule, TimeGrid, DEFAULT_T_MIN, DEFAULT_T_START};

pub const RL_COLUMNS: [&str; 8] = [
    "mean_reward",
    "reward_std",
    "mean_KL",
    "mean_ratio",
    "clip_fraction",
    "grad_norm",
    "wall_ms",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Registered objective: `awm` or `ddpo`.
    pub algorithm: String,
    pub group_size: usize,
    /// Groups sampled per iteration; all share `condition`.
    pub groups: usize,
    pub condition: usize,
    pub clip: bool,
    pub clip_eps: f64,
    pub beta: f64,
    pub weighting: Weighting,
    /// `p(t)` of the shared likelihood-surrogate draws.
    pub timesteps: TimestepSampler,
    pub m_draws: usize,
    pub off_policy_fraction: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Step rule used for rollouts (and scored by `ddpo`).
    pub sampler: String,
    pub sampler_steps: usize,
    pub updates_per_batch: usize,
    pub max_grad_norm: Option<f64>,
    pub reward: RewardSpec,
    /// Stop once the fresh-batch mean reward reaches this value.
    pub stop_at_reward: Option<f64>,
    /// Passed to the observer every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            algorithm: "awm".into(),
            group_size: 24,
            groups: 2,
            condition: 0,
            clip: true,
            clip_eps: 0.2,
            beta: 0.4,
            weighting: Weighting::Uniform,
            timesteps: TimestepSampler::discrete(),
            m_draws: 8,
            off_policy_fraction: 0.0,
            lr: 3e-4,
            iterations: 500,
            seed: 0,
            sampler: "sde-ei".into(),
            sampler_steps: 10,
            updates_per_batch: 1,
            max_grad_norm: None,
            reward: RewardSpec::default(),
            stop_at_reward: None,
            checkpoint_every: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        builtin_objectives().get(&self.algorithm)?;
        builtin_step_rules().get(&self.sampler)?;
        self.timesteps.validate()?;
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta={} must be >= 0", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.off_policy_fraction) {
            return Err(Error::Config(format!(
                "off_policy_fraction={} must lie in [0, 1]",
                self.off_policy_fraction
            )));
        }
        if self.clip && !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must lie in (0, 1)".into()));
        }
        if self.m_draws == 0 {
            return Err(Error::Config("m_draws must be positive".into()));
        }
        if self.sampler_steps == 0 || self.updates_per_batch == 0 {
            return Err(Error::Config("sampler_steps and updates_per_batch must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.group_size * self.groups
    }

    pub fn reused_per_iteration(&self) -> usize {
        (self.off_policy_fraction * self.batch_size() as f64).ceil() as usize
    }

    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            clip_eps: self.clip.then_some(self.clip_eps),
            beta: self.beta,
            weighting: self.weighting,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.sampler_steps, DEFAULT_T_START, DEFAULT_T_MIN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlRecord {
    pub iter: u64,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub seed: u64,
    pub reused: usize,
}

impl RlRecord {
    /// Values in [`RL_COLUMNS`] order.
    pub fn values(&self) -> Vec<f64> {
        vec![
            self.mean_reward,
            self.reward_std,
            self.mean_kl,
            self.mean_ratio,
            self.clip_fraction,
            self.grad_norm,
            self.wall_ms,
            self.seed as f64,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub records: Vec<RlRecord>,
    pub net: VelocityNet,
}

impl RlOutcome {
    /// First iteration whose fresh-batch mean reward is at least `level`.
    pub fn first_iter_reaching(&self, level: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.mean_reward >= level)
            .map(|r| r.iter)
    }
}

const DRAW_STREAM: u64 = 1 << 40;

pub fn rl_train(cfg: &RlConfig, net: VelocityNet) -> Result<RlOutcome> {
    rl_train_with(cfg, net, &mut |_, _, _| Ok(()))
}

/// Runs the loop, calling `observer` after each iteration (the net is post-update). It is
/// called with `checkpoint = true` every `checkpoint_every` iterations.
pub fn rl_train_with(
    cfg: &RlConfig,
    mut net: VelocityNet,
    observer: &mut dyn FnMut(&RlRecord, &VelocityNet, bool) -> Result<()>,
) -> Result<RlOutcome> {
    cfg.validate()?;
    cfg.reward.validate(net.arch().dim)?;
    if cfg.condition >= net.arch().num_classes {
        return Err(Error::Config(format!(
            "condition {} exceeds the net's {} classes",
            cfg.condition,
            net.arch().num_classes
        )));
    }
    let obj = objective(&cfg.algorithm, &cfg.sampler)?;
    let rule = step_rule(&cfg.sampler)?;
    let grid = cfg.grid()?;
    let reference = net.clone();
    let mut opt = Adam::new(net.param_count());
    let params = cfg.objective_params();
    let b = cfg.batch_size();
    let d = net.arch().dim;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    draw_rng.set_stream(DRAW_STREAM);
    let mut reuse_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    reuse_rng.set_stream(DRAW_STREAM + 1);
    let start = Instant::now();
    let mut previous: Option<(Vec<TrainSample>, VelocityNet)> = None;
    let mut records = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations as u64 {
        let old = net.clone();
        let classes = vec![cfg.condition; b];
        let trajs = rollout_batch(&net, &grid, rule.as_ref(), &classes, cfg.seed, iter * b as u64)?;
        let mut fresh = Vec::with_capacity(b);
        let mut rewards = Vec::with_capacity(b);
        for chunk in trajs.chunks(cfg.group_size) {
            let samples = chunk.iter().map(|t| t.sample.clone()).collect();
            let group = RolloutGroup::new(
                cfg.condition,
                samples,
                &cfg.reward,
                obj.needs_trajectories().then(|| chunk.to_vec()),
                iter,
                cfg.seed,
            )?;
            rewards.extend_from_slice(&group.rewards);
            let trajectories = group.trajectories.clone();
            for (k, x0) in group.samples.into_iter().enumerate() {
                fresh.push(TrainSample {
                    x0,
                    class: cfg.condition,
                    advantage: group.advantages[k],
                    policy: 0,
                    trajectory: trajectories.as_ref().map(|t| t[k].clone()),
                    draws: if obj.needs_trajectories() {
                        Vec::new()
                    } else {
                        draw_shared(&cfg.timesteps, cfg.m_draws, d, &mut draw_rng)
                    },
                });
            }
        }

        let mut batch = fresh.clone();
        let mut reused = 0;
        if let Some((prev, _)) = &previous {
            let n_reuse = cfg.reused_per_iteration().min(prev.len());
            let mut idx: Vec<usize> = (0..prev.len()).collect();
            idx.shuffle(&mut reuse_rng);
            for &i in &idx[..n_reuse] {
                batch.push(TrainSample {
                    policy: 1,
                    ..prev[i].clone()
                });
            }
            reused = n_reuse;
        }

        let mut first = None;
        for _ in 0..cfg.updates_per_batch {
            let prev_net = previous.as_ref().map(|(_, n)| n);
            let olds: Vec<&VelocityNet> = match prev_net {
                Some(p) => vec![&old, p],
                None => vec![&old],
            };
            let ctx = ObjectiveContext {
                net: &net,
                old: &olds,
                reference: &reference,
                params,
            };
            let (stats, mut grad) = obj.loss_and_grad(&ctx, &batch)?;
            let norm = match cfg.max_grad_norm {
                Some(m) => grad.clip_norm(m),
                None => grad.norm(),
            };
            first.get_or_insert((stats, norm));
            opt.step(&mut net, &grad, cfg.lr)?;
        }
        let (stats, grad_norm) = first.expect("at least one update");

        let n = rewards.len() as f64;
        let mean_reward = rewards.iter().sum::<f64>() / n;
        let reward_std = (rewards.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / n).sqrt();
        let rec = RlRecord {
            iter,
            mean_reward,
            reward_std,
            mean_kl: stats.mean_kl,
            mean_ratio: stats.mean_ratio,
            clip_fraction: stats.clip_fraction,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            seed: cfg.seed,
            reused,
        };
        let checkpoint = cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every as u64 == 0;
        observer(&rec, &net, checkpoint)?;
        records.push(rec);
        previous = (cfg.off_policy_fraction > 0.0).then(|| (fresh, old));
        if matches!(cfg.stop_at_reward, Some(level) if mean_reward >= level) {
            break;
        }
    }
    net.push_lineage(format!(
        "rl algorithm={} iterations={} seed={}",
        cfg.algorithm,
        records.len(),
        cfg.seed
    ));
    Ok(RlOutcome { records, net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Arch;

    fn net() -> VelocityNet {
        VelocityNet::init(
            Arch {
                dim: 2,
                hidden: vec![16, 16],
                num_classes: 1,
                embed_dim: 2,
                time_features: 8,
            },
            2,
        )
        .unwrap()
    }

    fn cfg(alg: &str) -> RlConfig {
        RlConfig {
            algorithm: alg.into(),
            group_size: 6,
            groups: 2,
            iterations: 4,
            m_draws: 3,
            reward: RewardSpec::GaussianBump {
                center: vec![1.0, 0.0],
                width: 1.0,
            },
            ..RlConfig::default()
        }
    }

    #[test]
    fn deterministic_for_both_algorithms() {
        for alg in ["awm", "ddpo"] {
            let c = cfg(alg);
            let a = rl_train(&c, net()).unwrap();
            let b = rl_train(&c, net()).unwrap();
            let strip = |o: &RlOutcome| {
                o.records
                    .iter()
                    .map(|r| {
                        let mut v = r.values();
                        v[6] = 0.0;
                        v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&a), strip(&b), "{alg}");
            assert_eq!(a.net.params(), b.net.params());
            assert!(a.records.iter().all(|r| r.mean_ratio == 1.0));
        }
    }

    #[test]
    fn off_policy_mix_reuses_ceil_half() {
        let c = RlConfig {
            off_policy_fraction: 0.5,
            groups: 1,
            group_size: 7,
            ..cfg("awm")
        };
        let out = rl_train(&c, net()).unwrap();
        let reused: Vec<usize> = out.records.iter().map(|r| r.reused).collect();
        assert_eq!(reused, vec![0, 4, 4, 4]);
        assert!(out.records[1..].iter().any(|r| r.mean_ratio != 1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            RlConfig { group_size: 1, ..cfg("awm") },
            RlConfig { beta: -1.0, ..cfg("awm") },
            RlConfig { off_policy_fraction: 1.5, ..cfg("awm") },
            RlConfig { algorithm: "ppo".into(), ..cfg("awm") },
            RlConfig { sampler: "ode".into(), ..cfg("ddpo") },
        ];
        for c in bad {
            assert!(rl_train(&c, net()).is_err(), "{c:?}");
        }
    }
}
