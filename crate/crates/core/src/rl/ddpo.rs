//! DDPO with group-relative advantages: every reverse step of a recorded trajectory is an
//! action with Gaussian likelihood `N(coef_x x_t + coef_v v_theta, var I)`.
//!
//! Per step `k` the importance ratio is `exp(logp_theta - logp_old)`; the PPO-clipped terms are
//! summed over steps and averaged over samples. The KL penalty per step is the exact Gaussian
//! KL `coef_v^2 |v_theta - v_ref|^2 / (2 var)`.

use ndarray::Array2;

use super::{clipped_term, ObjectiveContext, PolicyObjective, TrainSample, UpdateStats};
use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::net::Grad;
use crate::sampler::{step_rule, StepParams, StepRule};

/// Log-density of the recorded transition `x_t -> x_prev` under `field`.
#[allow(clippy::too_many_arguments)]
pub fn ddpo_step_logprob(
    field: &dyn VelocityField,
    rule: &dyn StepRule,
    x_prev: &[f64],
    xt: &[f64],
    t: f64,
    dt: f64,
    c: usize,
) -> Result<f64> {
    check_dim("ddpo step logprob", field.dim(), xt.len())?;
    let p = rule.params(t, dt)?;
    let x = Array2::from_shape_vec((1, xt.len()), xt.to_vec()).expect("row");
    let v = field.velocity(x.view(), &[t], &[c])?;
    p.log_prob(xt, v.row(0).as_slice().expect("contiguous"), x_prev)
}

#[derive(Debug)]
pub struct DdpoObjective {
    rule: Box<dyn StepRule>,
}

impl DdpoObjective {
    pub fn new(rule: &str) -> Result<Self> {
        let rule = step_rule(rule)?;
        if !rule.is_stochastic() {
            return Err(Error::Config(format!(
                "ddpo needs a stochastic sampler, '{}' is deterministic",
                rule.name()
            )));
        }
        Ok(Self { rule })
    }
}

struct StepRow {
    sample: usize,
    params: StepParams,
}

impl PolicyObjective for DdpoObjective {
    fn name(&self) -> &'static str {
        "ddpo"
    }

    fn needs_trajectories(&self) -> bool {
        true
    }

    fn loss_and_grad(&self, ctx: &ObjectiveContext<'_>, batch: &[TrainSample]) -> Result<(UpdateStats, Grad)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("ddpo update"));
        }
        let p = ctx.params;
        let d = ctx.net.arch().dim;
        let mut xs = Vec::new();
        let mut xp = Vec::new();
        let mut t = Vec::new();
        let mut c = Vec::new();
        let mut meta = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            let tr = s.trajectory.as_ref().ok_or_else(|| {
                Error::MissingTrajectory("ddpo update needs recorded trajectories".into())
            })?;
            if tr.rule != self.rule.name() {
                return Err(Error::Config(format!(
                    "trajectory sampled with '{}' but ddpo scores '{}'",
                    tr.rule,
                    self.rule.name()
                )));
            }
            for k in 0..tr.times.len() - 1 {
                let (tk, dt) = (tr.times[k], tr.times[k] - tr.times[k + 1]);
                xs.extend_from_slice(&tr.states[k]);
                xp.extend_from_slice(&tr.states[k + 1]);
                t.push(tk);
                c.push(s.class);
                meta.push(StepRow {
                    sample: i,
                    params: self.rule.params(tk, dt)?,
                });
            }
        }
        let rows = t.len();
        let x = Array2::from_shape_vec((rows, d), xs).expect("row layout");
        let x_prev = Array2::from_shape_vec((rows, d), xp).expect("row layout");
        let (v, rec) = ctx.net.forward_record(x.view(), &t, &c)?;
        let v_ref = if p.beta > 0.0 {
            Some(ctx.reference.forward(x.view(), &t, &c)?)
        } else {
            None
        };
        let mut v_old = Vec::with_capacity(ctx.old.len());
        for (k, old) in ctx.old.iter().enumerate() {
            let used = batch.iter().any(|s| s.policy == k);
            v_old.push(if used { Some(old.forward(x.view(), &t, &c)?) } else { None });
        }

        let n = batch.len() as f64;
        let mut up = Array2::<f64>::zeros(v.raw_dim());
        let mut stats = UpdateStats::default();
        for (r, m) in meta.iter().enumerate() {
            let s = &batch[m.sample];
            let vo = v_old
                .get(s.policy)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::Config(format!("sample refers to missing policy {}", s.policy)))?;
            let (a, b, var) = (m.params.coef_x, m.params.coef_v, m.params.var());
            let mut r2_new = 0.0;
            let mut r2_old = 0.0;
            for j in 0..d {
                let y = x_prev[[r, j]];
                r2_new += (y - a * x[[r, j]] - b * v[[r, j]]).powi(2);
                r2_old += (y - a * x[[r, j]] - b * vo[[r, j]]).powi(2);
            }
            let rho = (-(r2_new - r2_old) / (2.0 * var)).exp();
            let (term, dterm, clipped) = clipped_term(rho, s.advantage, p.clip_eps);
            stats.policy_loss += term / n;
            stats.mean_ratio += rho;
            stats.clip_fraction += f64::from(u8::from(clipped));
            // d logp / d v = b (x_prev - mean) / var
            let coef = dterm * rho / n;
            for j in 0..d {
                let resid = x_prev[[r, j]] - a * x[[r, j]] - b * v[[r, j]];
                up[[r, j]] += coef * b * resid / var;
            }
            if let Some(vr) = &v_ref {
                let mut kl = 0.0;
                for j in 0..d {
                    let diff = v[[r, j]] - vr[[r, j]];
                    kl += b * b * diff * diff / (2.0 * var);
                    up[[r, j]] += p.beta * b * b * diff / (var * n);
                }
                stats.mean_kl += kl / n;
            }
        }
        stats.mean_ratio /= rows as f64;
        stats.clip_fraction /= rows as f64;
        stats.loss = stats.policy_loss + p.beta * stats.mean_kl;
        let grad = ctx.net.backward(&rec, up.view())?;
        Ok((stats, grad))
    }
}
