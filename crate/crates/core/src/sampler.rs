//! Reverse-time generation from `t ~ 1` towards `t = 0`.
//!
//! Every step rule here is linear-Gaussian in `(x_t, v)`:
//!
//! ```text
//! x_{t-dt} = coef_x x_t + coef_v v(x_t, t, c) + noise_std * eps
//! ```
//!
//! * `ode` — probability-flow Euler, `(1, -dt, 0)`.
//! * `sde-em` — Euler–Maruyama on the reverse SDE with diffusion `g^2 = 2t/(1-t)`:
//!   `coef_x = 1 - dt/(1-t)`, `coef_v = -2 dt`, `noise_std = sqrt(2 t dt / (1-t))`.
//! * `sde-ei` — exponential integrator: with `s = t - dt` the step is exactly the
//!   forward-process posterior `p(x_s | x_t, x_0)` evaluated at the model's clean prediction
//!   `x_0 = x_t - t v`. Its first-order expansion in `dt` is the EM step.
//!
//! The EM coefficients blow up as `t -> 1` unless `dt << 1 - t`; prefer `sde-ei` on coarse grids.
//!
//! Rollouts are batched: all rows of a batch share one network call per step, while each row
//! draws its randomness from its own ChaCha stream so results do not depend on batch layout.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::registry::Registry;
use crate::schedule;

/// Top of the default grids; `t = 1` itself is excluded because the EM drift is singular there.
pub const DEFAULT_T_START: f64 = 1.0 - 1e-3;
pub const DEFAULT_T_MIN: f64 = 0.03;
pub const DEFAULT_INFERENCE_STEPS: usize = 20;
pub const DEFAULT_TRAIN_STEPS: usize = 4;

/// One-step Gaussian parameters of a step rule at `(t, dt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub coef_x: f64,
    pub coef_v: f64,
    pub noise_std: f64,
}

impl StepParams {
    pub fn var(&self) -> f64 {
        self.noise_std * self.noise_std
    }

    pub fn mean(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(v)
            .map(|(x, v)| self.coef_x * x + self.coef_v * v)
            .collect()
    }

    /// Log-density of `x_prev` under `N(mean(x, v), var I)` including the normaliser.
    pub fn log_prob(&self, x: &[f64], v: &[f64], x_prev: &[f64]) -> Result<f64> {
        let var = self.var();
        if var <= 0.0 {
            return Err(Error::domain("step log_prob", "deterministic step has no density"));
        }
        check_dim("step log_prob", x.len(), x_prev.len())?;
        let d = x.len() as f64;
        let r2: f64 = self
            .mean(x, v)
            .iter()
            .zip(x_prev)
            .map(|(m, y)| (y - m).powi(2))
            .sum();
        Ok(-0.5 * r2 / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln())
    }
}

pub trait StepRule: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn params(&self, t: f64, dt: f64) -> Result<StepParams>;

    fn is_stochastic(&self) -> bool {
        true
    }
}

fn check_step(op: &'static str, t: f64, dt: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(op, format!("t={t} outside (0, 1]")));
    }
    if !(dt > 0.0 && dt <= t) {
        return Err(Error::domain(op, format!("need 0 < dt <= t, got dt={dt}, t={t}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OdeEuler;

impl StepRule for OdeEuler {
    fn name(&self) -> &'static str {
        "ode"
    }

    fn params(&self, t: f64, dt: f64) -> Result<StepParams> {
        check_step("ode step", t, dt)?;
        Ok(StepParams {
            coef_x: 1.0,
            coef_v: -dt,
            noise_std: 0.0,
        })
    }

    fn is_stochastic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EulerMaruyama;

pub fn em_step_params(t: f64, dt: f64) -> Result<StepParams> {
    check_step("sde-em step", t, dt)?;
    if t > 1.0 - schedule::ENDPOINT_EPS {
        return Err(Error::domain("sde-em step", format!("t={t} too close to 1")));
    }
    Ok(StepParams {
        coef_x: 1.0 - dt / (1.0 - t),
        coef_v: -2.0 * dt,
        noise_std: (2.0 * t * dt / (1.0 - t)).sqrt(),
    })
}

impl StepRule for EulerMaruyama {
    fn name(&self) -> &'static str {
        "sde-em"
    }

    fn params(&self, t: f64, dt: f64) -> Result<StepParams> {
        em_step_params(t, dt)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExponentialIntegrator;

pub fn ei_step_params(t: f64, dt: f64) -> Result<StepParams> {
    let s = t - dt;
    if !(s > 0.0 && s < t && t < 1.0) {
        return Err(Error::domain(
            "sde-ei step",
            format!("need 0 < t - dt < t < 1, got t={t}, dt={dt}"),
        ));
    }
    let sig2 = schedule::sigma2(s, t)?;
    Ok(StepParams {
        coef_x: (1.0 - s) + (1.0 - t) * s * s / (t * (1.0 - s)),
        coef_v: -(1.0 - s) / t * sig2,
        noise_std: sig2.sqrt() * s / t,
    })
}

impl StepRule for ExponentialIntegrator {
    fn name(&self) -> &'static str {
        "sde-ei"
    }

    fn params(&self, t: f64, dt: f64) -> Result<StepParams> {
        ei_step_params(t, dt)
    }
}

pub type StepRuleFactory = fn() -> Box<dyn StepRule>;

pub fn builtin_step_rules() -> Registry<StepRuleFactory> {
    let mut r: Registry<StepRuleFactory> = Registry::new("step rule");
    r.register("ode", || Box::new(OdeEuler))
        .register("sde-em", || Box::new(EulerMaruyama))
        .register("sde-ei", || Box::new(ExponentialIntegrator));
    r
}

pub fn step_rule(name: &str) -> Result<Box<dyn StepRule>> {
    Ok((builtin_step_rules().get(name)?)())
}

/// Strictly decreasing times `t_0 > t_1 > ... > t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::domain("time grid", "need at least one step"));
        }
        if times.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::domain("time grid", "times must lie in (0, 1]"));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::domain("time grid", "times must be strictly decreasing"));
        }
        Ok(Self { times })
    }

    /// `n` equal steps from `t_start` down to `t_end`.
    pub fn uniform(n: usize, t_start: f64, t_end: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("time grid", "need at least one step"));
        }
        let h = (t_start - t_end) / n as f64;
        Self::new((0..=n).map(|k| t_start - h * k as f64).collect())
    }

    pub fn default_inference() -> Self {
        Self::uniform(DEFAULT_INFERENCE_STEPS, DEFAULT_T_START, DEFAULT_T_MIN).expect("valid")
    }

    pub fn default_training() -> Self {
        Self::uniform(DEFAULT_TRAIN_STEPS, DEFAULT_T_START, DEFAULT_T_MIN).expect("valid")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `(t_k, dt_k)` for each step.
    pub fn step_pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[0] - w[1]))
    }
}

/// One reverse-time rollout.
///
/// `states[k]` is the state at `times[k]` and `noises[k]` the standard-normal draw injected on
/// the step `k -> k+1` (all zeros for the ODE). `sample` is the output after the final
/// drift-only step from `times[N]` to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub index: u64,
    pub class: usize,
    pub rule: &'static str,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub sample: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Per-rollout generator: stream `index` of the ChaCha generator seeded with `seed`.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Applies one step to every row; `eps` must be given for stochastic rules.
pub fn step_batch(
    field: &dyn VelocityField,
    rule: &dyn StepRule,
    x: ArrayView2<'_, f64>,
    t: f64,
    dt: f64,
    classes: &[usize],
    eps: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<f64>> {
    let p = rule.params(t, dt)?;
    let tv = vec![t; x.nrows()];
    let v = field.velocity(x, &tv, classes)?;
    let mut out = &x * p.coef_x + &v * p.coef_v;
    if p.noise_std > 0.0 {
        let e = eps.ok_or_else(|| Error::domain("step", "stochastic rule needs noise"))?;
        check_dim("step noise", x.nrows(), e.nrows())?;
        check_dim("step noise", x.ncols(), e.ncols())?;
        out.scaled_add(p.noise_std, &e);
    }
    Ok(out)
}

/// `x - v dt` for a single state.
pub fn ode_euler_step(
    field: &dyn VelocityField,
    x: &[f64],
    t: f64,
    dt: f64,
    c: usize,
) -> Result<Vec<f64>> {
    check_dim("ode step", field.dim(), x.len())?;
    let xm = from_rows(&[x.to_vec()], x.len());
    Ok(step_batch(field, &OdeEuler, xm.view(), t, dt, &[c], None)?.row(0).to_vec())
}

/// One Euler–Maruyama step for a single state with caller-supplied noise.
pub fn sde_em_step(
    field: &dyn VelocityField,
    x: &[f64],
    t: f64,
    dt: f64,
    c: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    check_dim("sde-em step", field.dim(), x.len())?;
    check_dim("sde-em step", x.len(), eps.len())?;
    let xm = from_rows(&[x.to_vec()], x.len());
    let em = from_rows(&[eps.to_vec()], x.len());
    Ok(step_batch(field, &EulerMaruyama, xm.view(), t, dt, &[c], Some(em.view()))?
        .row(0)
        .to_vec())
}

/// Integrates a batch from explicit initial states with explicit per-step noise.
///
/// `noises[k]` is the `(B, d)` noise of step `k`; it is ignored for deterministic rules.
/// Returns all states (including the initial one) and the terminal drift-only output.
pub fn integrate(
    field: &dyn VelocityField,
    grid: &TimeGrid,
    rule: &dyn StepRule,
    x_init: Array2<f64>,
    classes: &[usize],
    noises: &[Array2<f64>],
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    check_dim("integrate", field.dim(), x_init.ncols())?;
    check_dim("integrate", x_init.nrows(), classes.len())?;
    if rule.is_stochastic() {
        check_dim("integrate (noise steps)", grid.steps(), noises.len())?;
    }
    let mut states = vec![x_init];
    for (k, (t, dt)) in grid.step_pairs().enumerate() {
        let eps = rule.is_stochastic().then(|| noises[k].view());
        let next = step_batch(field, rule, states[k].view(), t, dt, classes, eps)?;
        states.push(next);
    }
    let t_last = *grid.times().last().expect("non-empty grid");
    let last = states.last().expect("non-empty");
    let sample = step_batch(field, &OdeEuler, last.view(), t_last, t_last, classes, None)?;
    Ok((states, sample))
}

/// Batched rollouts with rows indexed `first_index..first_index + classes.len()`.
///
/// Row `i` draws its initial state and then its per-step noise from
/// `rollout_rng(seed, first_index + i)`.
pub fn rollout_batch(
    field: &dyn VelocityField,
    grid: &TimeGrid,
    rule: &dyn StepRule,
    classes: &[usize],
    seed: u64,
    first_index: u64,
) -> Result<Vec<Trajectory>> {
    let d = field.dim();
    let b = classes.len();
    let n = grid.steps();
    let mut init = Vec::with_capacity(b);
    let mut per_row_noise = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = rollout_rng(seed, first_index + i as u64);
        init.push(normal_vec(&mut rng, d));
        let noise: Vec<Vec<f64>> = if rule.is_stochastic() {
            (0..n).map(|_| normal_vec(&mut rng, d)).collect()
        } else {
            vec![vec![0.0; d]; n]
        };
        per_row_noise.push(noise);
    }
    let noises: Vec<Array2<f64>> = (0..n)
        .map(|k| Array2::from_shape_fn((b, d), |(i, j)| per_row_noise[i][k][j]))
        .collect();
    let (states, sample) = integrate(field, grid, rule, from_rows(&init, d), classes, &noises)?;
    let state_rows: Vec<Vec<Vec<f64>>> = states.iter().map(rows).collect();
    let sample_rows = rows(&sample);
    Ok((0..b)
        .map(|i| Trajectory {
            index: first_index + i as u64,
            class: classes[i],
            rule: rule.name(),
            times: grid.times().to_vec(),
            states: state_rows.iter().map(|s| s[i].clone()).collect(),
            noises: per_row_noise[i].clone(),
            sample: sample_rows[i].clone(),
        })
        .collect())
}

pub fn rollout(
    field: &dyn VelocityField,
    grid: &TimeGrid,
    rule: &dyn StepRule,
    class: usize,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    Ok(rollout_batch(field, grid, rule, &[class], seed, index)?.remove(0))
}

/// Re-runs a batch of trajectories from their stored initial states and noises.
pub fn replay(
    field: &dyn VelocityField,
    rule: &dyn StepRule,
    trajs: &[Trajectory],
) -> Result<Vec<Trajectory>> {
    let first = trajs
        .first()
        .ok_or(Error::EmptyBatch("trajectory replay"))?;
    let grid = TimeGrid::new(first.times.clone())?;
    let d = field.dim();
    let init: Vec<Vec<f64>> = trajs.iter().map(|t| t.states[0].clone()).collect();
    let classes: Vec<usize> = trajs.iter().map(|t| t.class).collect();
    let noises: Vec<Array2<f64>> = (0..grid.steps())
        .map(|k| Array2::from_shape_fn((trajs.len(), d), |(i, j)| trajs[i].noises[k][j]))
        .collect();
    let (states, sample) = integrate(field, &grid, rule, from_rows(&init, d), &classes, &noises)?;
    let state_rows: Vec<Vec<Vec<f64>>> = states.iter().map(rows).collect();
    let sample_rows = rows(&sample);
    Ok(trajs
        .iter()
        .enumerate()
        .map(|(i, t)| Trajectory {
            states: state_rows.iter().map(|s| s[i].clone()).collect(),
            sample: sample_rows[i].clone(),
            ..t.clone()
        })
        .collect())
}

/// Writes one CSV row per (rollout, step): run id, rollout id, k, t_k, state, noise.
///
/// The noise columns of row `k` hold the draw that produced state `k + 1`; the final row of a
/// rollout has zero noise.
pub fn write_trajectories_csv(path: &Path, run_id: &str, trajs: &[Trajectory]) -> Result<()> {
    let d = trajs.first().map_or(0, |t| t.sample.len());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# schema: awmlab-trajectory v1").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let mut header = vec!["run_id".to_string(), "rollout_id".into(), "k".into(), "t_k".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..d).map(|j| format!("noise{j}")));
    w.write_record(&header)?;
    for tr in trajs {
        for (k, (t, x)) in tr.times.iter().zip(&tr.states).enumerate() {
            let zeros = vec![0.0; d];
            let noise = tr.noises.get(k).unwrap_or(&zeros);
            let mut rec = vec![
                run_id.to_string(),
                tr.index.to_string(),
                k.to_string(),
                t.to_string(),
            ];
            rec.extend(x.iter().map(|v| v.to_string()));
            rec.extend(noise.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianMixture;
    use crate::field::{OracleField, ZeroField};
    use crate::net::{Arch, VelocityNet};

    #[test]
    fn zero_velocity_ode_keeps_state() {
        let x = ode_euler_step(&ZeroField(2), &[0.3, -1.0], 0.5, 0.1, 0).unwrap();
        assert_eq!(x, vec![0.3, -1.0]);
        assert!(ode_euler_step(&ZeroField(1), &[0.0], 0.2, 0.3, 0).is_err());
    }

    #[test]
    fn em_noise_coefficient() {
        let p = em_step_params(0.5, 0.01).unwrap();
        assert!((p.noise_std - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(em_step_params(1.0, 0.1).is_err());
        let oracle = OracleField::unconditional(GaussianMixture::preset("std-normal-1d").unwrap());
        let x = sde_em_step(&oracle, &[0.4], 0.5, 0.01, 0, &[0.0]).unwrap();
        assert!(x[0].is_finite());
    }

    #[test]
    fn ei_hand_values_and_identity() {
        let p = ei_step_params(0.5, 0.25).unwrap();
        let s2 = schedule::sigma2(0.25, 0.5).unwrap();
        assert!((p.noise_std - 0.235_702_260_395_515_8).abs() < 1e-12);
        assert!((p.var() - s2 * 0.25).abs() < 1e-15);
        assert!(ei_step_params(0.5, 0.5).is_err());
    }

    #[test]
    fn ei_is_posterior_at_predicted_clean_point() {
        // x_prev mean = posterior mean of x_s given (x0_hat = x - t v, x_t)
        let (t, dt) = (0.6, 0.2);
        let s = t - dt;
        let p = ei_step_params(t, dt).unwrap();
        let (x, v) = (0.7, -1.3);
        let x0_hat = x - t * v;
        let (m, var) = schedule::posterior_xs_params(&[x0_hat], &[x], s, t).unwrap();
        assert!((p.coef_x * x + p.coef_v * v - m[0]).abs() < 1e-12);
        assert!((p.var() - var).abs() < 1e-12);
    }

    #[test]
    fn ei_converges_to_em_at_second_order() {
        let t = 0.5;
        let mut prev: Option<f64> = None;
        let mut dt = 1e-2;
        for _ in 0..6 {
            let a = ei_step_params(t, dt).unwrap();
            let b = em_step_params(t, dt).unwrap();
            let gap = (a.coef_x - b.coef_x).abs()
                + (a.coef_v - b.coef_v).abs()
                + (a.var() - b.var()).abs();
            if let Some(p) = prev {
                let order = (p / gap).log2();
                assert!(order > 1.8, "order {order} at dt={dt}");
            }
            prev = Some(gap);
            dt /= 2.0;
        }
    }

    #[test]
    fn log_prob_at_mean() {
        let p = ei_step_params(0.5, 0.25).unwrap();
        let x = [0.2, -0.4];
        let v = [1.0, 0.5];
        let m = p.mean(&x, &v);
        let lp = p.log_prob(&x, &v, &m).unwrap();
        let expect = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * p.var()).ln();
        assert!((lp - expect).abs() < 1e-12);
        assert!(OdeEuler.params(0.5, 0.1).unwrap().log_prob(&x, &v, &m).is_err());
    }

    #[test]
    fn grid_shapes() {
        let g = TimeGrid::default_training();
        assert_eq!(g.steps(), 4);
        assert_eq!(g.times().len(), 5);
        assert!((g.times()[4] - DEFAULT_T_MIN).abs() < 1e-15);
        assert!(TimeGrid::new(vec![0.5, 0.5]).is_err());
        assert_eq!(TimeGrid::default_inference().steps(), 20);
    }

    #[test]
    fn registry_has_three_rules() {
        let r = builtin_step_rules();
        assert_eq!(r.names(), vec!["ode", "sde-ei", "sde-em"]);
        assert!(step_rule("heun").is_err());
    }

    fn tiny_net() -> VelocityNet {
        VelocityNet::init(
            Arch {
                dim: 2,
                hidden: vec![16],
                num_classes: 4,
                embed_dim: 4,
                time_features: 8,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn rollouts_are_deterministic_and_replay_exactly() {
        let net = tiny_net();
        let grid = TimeGrid::default_training();
        for name in ["ode", "sde-em", "sde-ei"] {
            let rule = step_rule(name).unwrap();
            let a = rollout_batch(&net, &grid, rule.as_ref(), &[0, 1, 2, 3], 9, 0).unwrap();
            let b = rollout_batch(&net, &grid, rule.as_ref(), &[0, 1, 2, 3], 9, 0).unwrap();
            assert_eq!(a, b);
            assert_eq!(a[0].len(), 5);
            let r = replay(&net, rule.as_ref(), &a).unwrap();
            assert_eq!(a, r);
        }
    }

    #[test]
    fn rollout_rows_use_independent_streams() {
        let net = tiny_net();
        let grid = TimeGrid::default_training();
        let rule = ExponentialIntegrator;
        let batch = rollout_batch(&net, &grid, &rule, &[0, 1, 2], 5, 10).unwrap();
        let single = rollout(&net, &grid, &rule, 1, 5, 11).unwrap();
        assert_eq!(batch[1].noises, single.noises);
        assert_eq!(batch[1].states[0], single.states[0]);
        for k in 0..batch[1].len() {
            for j in 0..2 {
                assert!((batch[1].states[k][j] - single.states[k][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_csv_has_one_row_per_state() {
        let net = tiny_net();
        let trajs =
            rollout_batch(&net, &TimeGrid::default_training(), &OdeEuler, &[0, 1], 1, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectories_csv(&path, "run", &trajs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2 + 2 * 5);
        assert!(text.lines().nth(1).unwrap().starts_with("run_id,rollout_id,k,t_k,x0,x1"));
    }
}
