//! Flow-matching pretraining with either the clean regression target `eps - x_0` or the noisy
//! target obtained by conditioning on an intermediate `x_s` (see [`crate::schedule`]).
//!
//! Both targets have the same conditional mean given `x_t`, so they share the population
//! minimiser; the noisy one only adds variance, which slows convergence.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::field::{OracleField, VelocityField};
use crate::metrics::sliced_w1;
use crate::net::{Adam, ArchConfig, Grad, VelocityNet};
use crate::registry::Registry;
use crate::sampler::{self, OdeEuler, TimeGrid};
use crate::schedule;

pub const DEFAULT_T_MIN: f64 = 0.03;
pub const DEFAULT_T_MAX: f64 = 0.97;

/// Distribution `p(t)` of training times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimestepSampler {
    /// Uniform over a finite set of points.
    Discrete {
        #[serde(default = "default_discrete_points")]
        points: Vec<f64>,
    },
    Uniform {
        #[serde(default = "default_t_min")]
        t_min: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
    /// `sigmoid(N(mu, sigma^2))`, redrawn until it lands in `[t_min, t_max]`.
    LogitNormal {
        #[serde(default)]
        mu: f64,
        #[serde(default = "one")]
        sigma: f64,
        #[serde(default = "default_t_min")]
        t_min: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
}

fn default_discrete_points() -> Vec<f64> {
    vec![0.125, 0.375, 0.625, 0.875]
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}

fn one() -> f64 {
    1.0
}

impl Default for TimestepSampler {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TimestepSampler {
    pub fn discrete() -> Self {
        Self::Discrete {
            points: default_discrete_points(),
        }
    }

    pub fn uniform() -> Self {
        Self::Uniform {
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    pub fn logit_normal() -> Self {
        Self::LogitNormal {
            mu: 0.0,
            sigma: 1.0,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |t: f64| t > 0.0 && t < 1.0;
        match self {
            Self::Discrete { points } => {
                if points.is_empty() || !points.iter().all(|&t| in_unit(t)) {
                    return Err(Error::Config(
                        "discrete timesteps must be a non-empty list inside (0, 1)".into(),
                    ));
                }
            }
            Self::Uniform { t_min, t_max } | Self::LogitNormal { t_min, t_max, .. } => {
                if !(in_unit(*t_min) && in_unit(*t_max) && t_min < t_max) {
                    return Err(Error::Config(format!(
                        "need 0 < t_min < t_max < 1, got [{t_min}, {t_max}]"
                    )));
                }
            }
        }
        if let Self::LogitNormal { sigma, .. } = self {
            if !(*sigma > 0.0) {
                return Err(Error::Config("logit-normal sigma must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Discrete { points } => points[rng.random_range(0..points.len())],
            Self::Uniform { t_min, t_max } => rng.random_range(*t_min..*t_max),
            Self::LogitNormal {
                mu,
                sigma,
                t_min,
                t_max,
            } => loop {
                let z: f64 = rng.sample(StandardNormal);
                let t = 1.0 / (1.0 + (-(mu + sigma * z)).exp());
                if t >= *t_min && t <= *t_max {
                    break t;
                }
            },
        }
    }
}

/// How the intermediate time `s` of the noisy target is chosen from `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SRule {
    Zero,
    Proportional { rho: f64 },
    Fixed { s: f64 },
}

impl Default for SRule {
    fn default() -> Self {
        SRule::Proportional { rho: 0.8 }
    }
}

impl SRule {
    pub fn s_for(&self, t: f64) -> Result<f64> {
        let s = match *self {
            SRule::Zero => 0.0,
            SRule::Proportional { rho } => rho * t,
            SRule::Fixed { s } => s,
        };
        if !(s >= 0.0 && s < t) {
            return Err(Error::SRuleViolation { s, t });
        }
        Ok(s)
    }
}

/// One regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDraw {
    pub t: f64,
    pub xt: Vec<f64>,
    pub target: Vec<f64>,
}

pub trait RegressionTarget: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Draws `t`, builds `x_t` from `x0` and returns the regression target.
    ///
    /// Draw order is `t`, then the noise reaching `x_t`, then (noisy only, `s > 0`) the noise
    /// reaching `x_s`, so that a zero `s` consumes exactly the clean target's randomness.
    fn draw(&self, x0: &[f64], ts: &TimestepSampler, rng: &mut dyn RngCore) -> Result<TargetDraw>;
}

fn normal_vec(rng: &mut dyn RngCore, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Target `eps - x_0` at `x_t = (1 - t) x_0 + t eps`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CleanTarget;

impl RegressionTarget for CleanTarget {
    fn name(&self) -> &'static str {
        "clean"
    }

    fn draw(&self, x0: &[f64], ts: &TimestepSampler, rng: &mut dyn RngCore) -> Result<TargetDraw> {
        let t = ts.sample(rng);
        let eps = normal_vec(rng, x0.len());
        let xt = schedule::forward_sample(x0, t, &eps)?;
        let target = eps.iter().zip(x0).map(|(e, x)| e - x).collect();
        Ok(TargetDraw { t, xt, target })
    }
}

/// Velocity form of the kernel score conditioned on `x_s`, `s = rule(t)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoisyTarget {
    pub rule: SRule,
}

impl RegressionTarget for NoisyTarget {
    fn name(&self) -> &'static str {
        "noisy"
    }

    fn draw(&self, x0: &[f64], ts: &TimestepSampler, rng: &mut dyn RngCore) -> Result<TargetDraw> {
        let t = ts.sample(rng);
        let s = self.rule.s_for(t)?;
        let eps_t = normal_vec(rng, x0.len());
        let xs = if s == 0.0 {
            x0.to_vec()
        } else {
            let eps_s = normal_vec(rng, x0.len());
            schedule::forward_sample(x0, s, &eps_s)?
        };
        let xt = schedule::transition_sample(&xs, s, t, &eps_t)?;
        let target = schedule::noisy_velocity_target(&xs, &xt, s, t)?;
        Ok(TargetDraw { t, xt, target })
    }
}

pub type TargetFactory = fn(SRule) -> Box<dyn RegressionTarget>;

pub fn builtin_targets() -> Registry<TargetFactory> {
    let mut r: Registry<TargetFactory> = Registry::new("pretraining target");
    r.register("clean", |_| Box::new(CleanTarget))
        .register("noisy", |rule| Box::new(NoisyTarget { rule }));
    r
}

pub fn target(name: &str, rule: SRule) -> Result<Box<dyn RegressionTarget>> {
    Ok((builtin_targets().get(name)?)(rule))
}

/// `mean_i ||v_theta(x_i, t_i, c_i) - y_i||^2` and its exact parameter gradient.
pub fn regression_loss_and_grad(
    net: &VelocityNet,
    xt: &Array2<f64>,
    t: &[f64],
    c: &[usize],
    target: &Array2<f64>,
) -> Result<(f64, Grad)> {
    let b = xt.nrows();
    if b == 0 {
        return Err(Error::EmptyBatch("regression loss"));
    }
    let (v, rec) = net.forward_record(xt.view(), t, c)?;
    let resid = &v - target;
    let loss = resid.mapv(|r| r * r).sum() / b as f64;
    let up = resid * (2.0 / b as f64);
    Ok((loss, net.backward(&rec, up.view())?))
}

/// Regression loss over `batch` with one fresh target draw per example.
pub fn target_loss_and_grad(
    net: &VelocityNet,
    batch: &[(Vec<f64>, usize)],
    target: &dyn RegressionTarget,
    ts: &TimestepSampler,
    rng: &mut dyn RngCore,
) -> Result<(f64, Grad)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("pretraining batch"));
    }
    let d = net.arch().dim;
    let mut xt = Array2::zeros((batch.len(), d));
    let mut y = Array2::zeros((batch.len(), d));
    let mut t = Vec::with_capacity(batch.len());
    let mut c = Vec::with_capacity(batch.len());
    for (i, (x0, cls)) in batch.iter().enumerate() {
        let draw = target.draw(x0, ts, rng)?;
        for j in 0..d {
            xt[[i, j]] = draw.xt[j];
            y[[i, j]] = draw.target[j];
        }
        t.push(draw.t);
        c.push(*cls);
    }
    regression_loss_and_grad(net, &xt, &t, &c, &y)
}

pub fn fm_loss_and_grad(
    net: &VelocityNet,
    batch: &[(Vec<f64>, usize)],
    ts: &TimestepSampler,
    rng: &mut dyn RngCore,
) -> Result<(f64, Grad)> {
    target_loss_and_grad(net, batch, &CleanTarget, ts, rng)
}

pub fn noisy_dsm_loss_and_grad(
    net: &VelocityNet,
    batch: &[(Vec<f64>, usize)],
    rule: SRule,
    ts: &TimestepSampler,
    rng: &mut dyn RngCore,
) -> Result<(f64, Grad)> {
    target_loss_and_grad(net, batch, &NoisyTarget { rule }, ts, rng)
}

pub fn sample_timestep<R: Rng + ?Sized>(sampler: &TimestepSampler, rng: &mut R) -> f64 {
    sampler.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub preset: String,
    pub arch: ArchConfig,
    pub timesteps: TimestepSampler,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Registered target name: `clean` or `noisy`.
    pub target: String,
    pub s_rule: SRule,
    /// When false every example carries label 0 and the oracle is the unconditional mixture.
    pub conditional: bool,
    pub eval_every: usize,
    pub eval_points: usize,
    /// Stop early once the oracle MSE falls to this value.
    pub stop_below: Option<f64>,
    /// Number of ODE and data samples for the final sliced W1; 0 disables it.
    pub w1_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            preset: "ring-8".into(),
            arch: ArchConfig::default(),
            timesteps: TimestepSampler::default(),
            batch_size: 256,
            steps: 2000,
            lr: 3e-4,
            seed: 0,
            target: "clean".into(),
            s_rule: SRule::default(),
            conditional: true,
            eval_every: 50,
            eval_points: 1800,
            stop_below: None,
            w1_samples: 10_000,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        GaussianMixture::preset(&self.preset)?;
        self.timesteps.validate()?;
        builtin_targets().get(&self.target)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.eval_every == 0 || self.eval_points == 0 {
            return Err(Error::Config("eval_every and eval_points must be positive".into()));
        }
        if self.target == "noisy" {
            // catch rules that can never satisfy s < t before training starts
            match self.s_rule {
                SRule::Proportional { rho } if !(0.0..1.0).contains(&rho) => {
                    return Err(Error::Config(format!("s_rule rho={rho} must be in [0, 1)")))
                }
                SRule::Fixed { s } if s < 0.0 => {
                    return Err(Error::Config(format!("s_rule s={s} must be >= 0")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Fixed `(x_t, t, c)` points with their exact optimal velocities.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub xt: Array2<f64>,
    pub t: Vec<f64>,
    pub c: Vec<usize>,
    pub oracle: Array2<f64>,
}

const EVAL_SEED: u64 = 0x5eed_e7a1;
const EVAL_TIMES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

impl EvalSet {
    /// Marginal draws on a 9-point time grid, independent of the training seed.
    pub fn build(gm: &GaussianMixture, n: usize, conditional: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
        let oracle_field = if conditional {
            OracleField::conditional(gm.clone())?
        } else {
            OracleField::unconditional(gm.clone())
        };
        let d = gm.dim();
        let mut xt = Array2::zeros((n, d));
        let mut t = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for i in 0..n {
            let ti = EVAL_TIMES[i % EVAL_TIMES.len()];
            let (x0, cls) = gm.sample(&mut rng);
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let x = schedule::forward_sample(&x0, ti, &eps)?;
            for j in 0..d {
                xt[[i, j]] = x[j];
            }
            t.push(ti);
            c.push(if conditional { cls } else { 0 });
        }
        let oracle = oracle_field.velocity(xt.view(), &t, &c)?;
        Ok(Self { xt, t, c, oracle })
    }

    pub fn mse(&self, field: &dyn VelocityField) -> Result<f64> {
        let v = field.velocity(self.xt.view(), &self.t, &self.c)?;
        let n = self.t.len() as f64;
        Ok((&v - &self.oracle).mapv(|r| r * r).sum() / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainRecord {
    pub step: u64,
    pub loss: f64,
    /// NaN on steps without an evaluation.
    pub oracle_mse: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub records: Vec<PretrainRecord>,
    pub net: VelocityNet,
    pub final_oracle_mse: f64,
    pub final_w1: Option<f64>,
}

impl PretrainOutcome {
    /// First evaluated step whose oracle MSE is at or below `tau`.
    pub fn first_step_below(&self, tau: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.oracle_mse <= tau)
            .map(|r| r.step)
    }
}

/// Draws `n` ODE samples (20-step default grid) with labels drawn like the data.
pub fn ode_samples(
    net: &VelocityNet,
    gm: &GaussianMixture,
    n: usize,
    conditional: bool,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, c) = gm.sample(&mut rng);
        data.push(x);
        classes.push(if conditional { c } else { 0 });
    }
    let trajs = sampler::rollout_batch(
        net,
        &TimeGrid::default_inference(),
        &OdeEuler,
        &classes,
        seed,
        0,
    )?;
    Ok((trajs.into_iter().map(|t| t.sample).collect(), data))
}

/// Runs the pretraining loop; deterministic given the config (apart from `wall_ms`).
pub fn pretrain_run(cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let gm = GaussianMixture::preset(&cfg.preset)?;
    let arch = cfg.arch.for_dim(gm.dim());
    if cfg.conditional && gm.num_classes() > arch.num_classes {
        return Err(Error::Config(format!(
            "mixture has {} classes but the net embeds only {}",
            gm.num_classes(),
            arch.num_classes
        )));
    }
    let mut net = VelocityNet::init(arch, cfg.seed)?;
    let tgt = target(&cfg.target, cfg.s_rule)?;
    let eval = EvalSet::build(&gm, cfg.eval_points, cfg.conditional)?;
    let mut opt = Adam::new(net.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.steps);
    let mut last_mse = eval.mse(&net)?;
    for step in 1..=cfg.steps as u64 {
        let batch: Vec<(Vec<f64>, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let (x, c) = gm.sample(&mut rng);
                (x, if cfg.conditional { c } else { 0 })
            })
            .collect();
        let (loss, grad) = target_loss_and_grad(&net, &batch, tgt.as_ref(), &cfg.timesteps, &mut rng)?;
        opt.step(&mut net, &grad, cfg.lr)?;
        let oracle_mse = if step % cfg.eval_every as u64 == 0 || step == cfg.steps as u64 {
            last_mse = eval.mse(&net)?;
            last_mse
        } else {
            f64::NAN
        };
        records.push(PretrainRecord {
            step,
            loss,
            oracle_mse,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if matches!(cfg.stop_below, Some(tau) if oracle_mse <= tau) {
            break;
        }
    }
    net.push_lineage(format!(
        "pretrain target={} preset={} steps={} seed={}",
        cfg.target,
        cfg.preset,
        records.len(),
        cfg.seed
    ));
    let final_w1 = if cfg.w1_samples > 0 {
        let (gen, data) = ode_samples(&net, &gm, cfg.w1_samples, cfg.conditional, cfg.seed)?;
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x77);
        Some(sliced_w1(&gen, &data, 64, &mut prng)?)
    } else {
        None
    };
    Ok(PretrainOutcome {
        records,
        net,
        final_oracle_mse: last_mse,
        final_w1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Arch;

    fn small_net(dim: usize) -> VelocityNet {
        VelocityNet::init(
            Arch {
                dim,
                hidden: vec![16, 16],
                num_classes: 8,
                embed_dim: 4,
                time_features: 8,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn s_rule_violations() {
        assert_eq!(SRule::Zero.s_for(0.4).unwrap(), 0.0);
        assert!((SRule::default().s_for(0.5).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(
            SRule::Fixed { s: 0.5 }.s_for(0.5),
            Err(Error::SRuleViolation { .. })
        ));
    }

    #[test]
    fn zero_s_rule_matches_clean_draws() {
        let ts = TimestepSampler::uniform();
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let noisy = NoisyTarget { rule: SRule::Zero };
        for _ in 0..200 {
            let x0 = [0.3, -1.2];
            let c = CleanTarget.draw(&x0, &ts, &mut a).unwrap();
            let n = noisy.draw(&x0, &ts, &mut b).unwrap();
            assert_eq!(c.t, n.t);
            assert_eq!(c.xt, n.xt);
            for (p, q) in c.target.iter().zip(&n.target) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_substitution_gives_zero_loss() {
        let net = small_net(1);
        let xt = Array2::from_shape_vec((3, 1), vec![0.1, -0.5, 2.0]).unwrap();
        let t = [0.2, 0.5, 0.8];
        let c = [0, 0, 0];
        let y = net.forward(xt.view(), &t, &c).unwrap();
        let (loss, grad) = regression_loss_and_grad(&net, &xt, &t, &c, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.0.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn losses_nonnegative_and_empty_batch_rejected() {
        let net = small_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = vec![(vec![1.0, 0.0], 0), (vec![0.0, -1.0], 3)];
        let ts = TimestepSampler::discrete();
        let (l1, _) = fm_loss_and_grad(&net, &batch, &ts, &mut rng).unwrap();
        let (l2, _) = noisy_dsm_loss_and_grad(&net, &batch, SRule::default(), &ts, &mut rng).unwrap();
        assert!(l1 >= 0.0 && l2 >= 0.0);
        assert!(matches!(
            fm_loss_and_grad(&net, &[], &ts, &mut rng),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn logit_normal_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = TimestepSampler::LogitNormal {
            mu: 0.0,
            sigma: 1.0,
            t_min: 1e-6,
            t_max: 1.0 - 1e-6,
        };
        for _ in 0..10_000 {
            let t = ts.sample(&mut rng);
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn target_registry() {
        let reg = builtin_targets();
        assert_eq!(reg.names(), vec!["clean", "noisy"]);
        assert_eq!(target("noisy", SRule::Zero).unwrap().name(), "noisy");
        assert!(target("dirty", SRule::Zero).is_err());
    }

    #[test]
    fn zero_steps_gives_empty_stream() {
        let cfg = PretrainConfig {
            steps: 0,
            w1_samples: 0,
            eval_points: 18,
            arch: ArchConfig {
                hidden: vec![8],
                ..ArchConfig::default()
            },
            ..PretrainConfig::default()
        };
        let out = pretrain_run(&cfg).unwrap();
        assert!(out.records.is_empty());
        let init = VelocityNet::init(cfg.arch.for_dim(2), cfg.seed).unwrap();
        assert_eq!(out.net.params(), init.params());
    }

    #[test]
    fn short_run_is_deterministic() {
        let cfg = PretrainConfig {
            steps: 6,
            batch_size: 16,
            eval_every: 3,
            eval_points: 27,
            w1_samples: 64,
            arch: ArchConfig {
                hidden: vec![8, 8],
                ..ArchConfig::default()
            },
            target: "noisy".into(),
            ..PretrainConfig::default()
        };
        let a = pretrain_run(&cfg).unwrap();
        let b = pretrain_run(&cfg).unwrap();
        let strip = |o: &PretrainOutcome| {
            o.records
                .iter()
                .map(|r| (r.step, r.loss.to_bits(), r.oracle_mse.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.final_w1, b.final_w1);
        assert!(a.records[1].oracle_mse.is_nan());
        assert!(a.records[2].oracle_mse.is_finite());
    }
}
