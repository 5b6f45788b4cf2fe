//! Advantage weighted matching.
//!
//! The sequence log-likelihood of a final sample `x0` is replaced by the negated weighted
//! flow-matching loss evaluated on `M` shared `(t_j, eps_j)` draws:
//!
//! ```text
//! L(theta; x0) = -(1/M) sum_j w(t_j) |v_theta(x_{t_j}, t_j, c) - (eps_j - x0)|^2
//! rho          = exp(L(theta) - L(theta_old))
//! KL           = (1/M) sum_j w(t_j) |v_theta - v_ref|^2
//! loss         = mean_i -min(rho_i A_i, clip(rho_i) A_i) + beta * mean_i KL_i
//! ```
//!
//! Using the same draws for `theta`, `theta_old` and `theta_ref` cancels most of the Monte-Carlo
//! noise in the differences. On-policy, `d rho = d L`, so the update is exactly the
//! advantage-weighted flow-matching gradient.

use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{clipped_term, ObjectiveContext, PolicyObjective, TrainSample, UpdateStats};
use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::net::Grad;
use crate::pretrain::TimestepSampler;
use crate::schedule;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// `(1 - t) / t`.
    Elbo,
}

impl Weighting {
    pub fn weight(&self, t: f64) -> f64 {
        match self {
            Weighting::Uniform => 1.0,
            Weighting::Elbo => (1.0 - t) / t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedDraw {
    pub t: f64,
    pub eps: Vec<f64>,
}

pub fn draw_shared(ts: &TimestepSampler, m: usize, d: usize, rng: &mut dyn RngCore) -> Vec<SharedDraw> {
    (0..m)
        .map(|_| {
            let t = ts.sample(rng);
            let eps = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            SharedDraw { t, eps }
        })
        .collect()
}

/// Rows `(x_{t_j}, t_j, c)` and targets `eps_j - x0` for every (sample, draw) pair.
struct Rows {
    xt: Array2<f64>,
    t: Vec<f64>,
    c: Vec<usize>,
    target: Array2<f64>,
    w: Vec<f64>,
}

fn build_rows<'a, I>(items: I, d: usize, weighting: Weighting) -> Result<Rows>
where
    I: IntoIterator<Item = (&'a [f64], usize, &'a [SharedDraw])>,
{
    let mut xt = Vec::new();
    let mut target = Vec::new();
    let mut t = Vec::new();
    let mut c = Vec::new();
    let mut w = Vec::new();
    for (x0, cls, draws) in items {
        check_dim("awm rows", d, x0.len())?;
        if draws.is_empty() {
            return Err(Error::EmptyBatch("awm shared draws (M = 0)"));
        }
        for dr in draws {
            xt.extend(schedule::forward_sample(x0, dr.t, &dr.eps)?);
            target.extend(dr.eps.iter().zip(x0).map(|(e, x)| e - x));
            t.push(dr.t);
            c.push(cls);
            w.push(weighting.weight(dr.t));
        }
    }
    let n = t.len();
    if n == 0 {
        return Err(Error::EmptyBatch("awm batch"));
    }
    Ok(Rows {
        xt: Array2::from_shape_vec((n, d), xt).expect("row layout"),
        t,
        c,
        target: Array2::from_shape_vec((n, d), target).expect("row layout"),
        w,
    })
}

fn weighted_sq(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>, w: f64) -> f64 {
    w * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
}

/// The likelihood surrogate `L(theta; x0)`; always `<= 0`.
pub fn awm_loglik_surrogate(
    field: &dyn VelocityField,
    x0: &[f64],
    c: usize,
    draws: &[SharedDraw],
    weighting: Weighting,
) -> Result<f64> {
    let rows = build_rows([(x0, c, draws)], field.dim(), weighting)?;
    let v = field.velocity(rows.xt.view(), &rows.t, &rows.c)?;
    let m = draws.len() as f64;
    Ok(-(0..rows.t.len())
        .map(|r| weighted_sq(v.row(r), rows.target.row(r), rows.w[r]))
        .sum::<f64>()
        / m)
}

/// `exp(L(theta) - L(theta_old))` on the shared draws (uniform weighting).
pub fn awm_ratio(
    field: &dyn VelocityField,
    old: &dyn VelocityField,
    x0: &[f64],
    c: usize,
    draws: &[SharedDraw],
) -> Result<f64> {
    let a = awm_loglik_surrogate(field, x0, c, draws, Weighting::Uniform)?;
    let b = awm_loglik_surrogate(old, x0, c, draws, Weighting::Uniform)?;
    Ok((a - b).exp())
}

/// `(1/M) sum_j w(t_j) |v_theta - v_ref|^2`.
pub fn awm_kl(
    field: &dyn VelocityField,
    reference: &dyn VelocityField,
    x0: &[f64],
    c: usize,
    draws: &[SharedDraw],
    weighting: Weighting,
) -> Result<f64> {
    let rows = build_rows([(x0, c, draws)], field.dim(), weighting)?;
    let v = field.velocity(rows.xt.view(), &rows.t, &rows.c)?;
    let vr = reference.velocity(rows.xt.view(), &rows.t, &rows.c)?;
    Ok((0..rows.t.len())
        .map(|r| weighted_sq(v.row(r), vr.row(r), rows.w[r]))
        .sum::<f64>()
        / draws.len() as f64)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AwmObjective;

impl PolicyObjective for AwmObjective {
    fn name(&self) -> &'static str {
        "awm"
    }

    fn needs_trajectories(&self) -> bool {
        false
    }

    fn loss_and_grad(&self, ctx: &ObjectiveContext<'_>, batch: &[TrainSample]) -> Result<(UpdateStats, Grad)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("awm update"));
        }
        let p = ctx.params;
        let d = ctx.net.arch().dim;
        let rows = build_rows(
            batch.iter().map(|s| (s.x0.as_slice(), s.class, s.draws.as_slice())),
            d,
            p.weighting,
        )?;
        let (v, rec) = ctx.net.forward_record(rows.xt.view(), &rows.t, &rows.c)?;
        let v_ref = if p.beta > 0.0 {
            Some(ctx.reference.forward(rows.xt.view(), &rows.t, &rows.c)?)
        } else {
            None
        };
        let mut v_old = Vec::with_capacity(ctx.old.len());
        for (k, old) in ctx.old.iter().enumerate() {
            let used = batch.iter().any(|s| s.policy == k);
            v_old.push(if used {
                Some(old.forward(rows.xt.view(), &rows.t, &rows.c)?)
            } else {
                None
            });
        }

        let n = batch.len() as f64;
        let mut up = Array2::<f64>::zeros(v.raw_dim());
        let mut stats = UpdateStats::default();
        let mut row = 0;
        for s in batch {
            let m = s.draws.len();
            let vo = v_old
                .get(s.policy)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::Config(format!("sample refers to missing policy {}", s.policy)))?;
            let range = row..row + m;
            let mf = m as f64;
            let l_new: f64 = -range
                .clone()
                .map(|r| weighted_sq(v.row(r), rows.target.row(r), rows.w[r]))
                .sum::<f64>()
                / mf;
            let l_old: f64 = -range
                .clone()
                .map(|r| weighted_sq(vo.row(r), rows.target.row(r), rows.w[r]))
                .sum::<f64>()
                / mf;
            let rho = (l_new - l_old).exp();
            let (term, dterm, clipped) = clipped_term(rho, s.advantage, p.clip_eps);
            stats.policy_loss += term / n;
            stats.mean_ratio += rho / n;
            stats.clip_fraction += f64::from(u8::from(clipped)) / n;
            // d rho / d v_r = rho * (-2 w_r / M) (v_r - target_r)
            let coef = dterm * rho / n;
            for r in range.clone() {
                let g = -2.0 * rows.w[r] / mf * coef;
                for j in 0..d {
                    up[[r, j]] += g * (v[[r, j]] - rows.target[[r, j]]);
                }
            }
            if let Some(vr) = &v_ref {
                let kl: f64 = range
                    .clone()
                    .map(|r| weighted_sq(v.row(r), vr.row(r), rows.w[r]))
                    .sum::<f64>()
                    / mf;
                stats.mean_kl += kl / n;
                for r in range {
                    let g = p.beta * 2.0 * rows.w[r] / (mf * n);
                    for j in 0..d {
                        up[[r, j]] += g * (v[[r, j]] - vr[[r, j]]);
                    }
                }
            }
            row += m;
        }
        stats.loss = stats.policy_loss + p.beta * stats.mean_kl;
        let grad = ctx.net.backward(&rec, up.view())?;
        Ok((stats, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ZeroField;
    use crate::net::{Arch, VelocityNet};
    use crate::rl::ObjectiveParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> VelocityNet {
        VelocityNet::init(
            Arch {
                dim: 2,
                hidden: vec![16, 16],
                num_classes: 2,
                embed_dim: 4,
                time_features: 8,
            },
            seed,
        )
        .unwrap()
    }

    fn draws(m: usize, seed: u64) -> Vec<SharedDraw> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        draw_shared(&TimestepSampler::discrete(), m, 2, &mut rng)
    }

    /// Velocity field that returns `eps - x0` exactly for the draws of one sample.
    #[derive(Debug)]
    struct Perfect {
        x0: Vec<f64>,
    }

    impl VelocityField for Perfect {
        fn dim(&self) -> usize {
            2
        }

        fn velocity(&self, x: ndarray::ArrayView2<'_, f64>, t: &[f64], _c: &[usize]) -> Result<Array2<f64>> {
            // x = (1-t) x0 + t eps  =>  eps - x0 = (x - x0) / t
            Ok(Array2::from_shape_fn(x.raw_dim(), |(i, j)| (x[[i, j]] - self.x0[j]) / t[i]))
        }
    }

    #[test]
    fn surrogate_is_nonpositive_and_zero_at_oracle() {
        let dr = draws(8, 1);
        let x0 = vec![0.5, -1.0];
        let s = awm_loglik_surrogate(&net(1), &x0, 0, &dr, Weighting::Uniform).unwrap();
        assert!(s < 0.0);
        let p = awm_loglik_surrogate(&Perfect { x0: x0.clone() }, &x0, 0, &dr, Weighting::Uniform).unwrap();
        assert!(p.abs() < 1e-24);
        assert!(awm_loglik_surrogate(&net(1), &x0, 0, &[], Weighting::Uniform).is_err());
    }

    #[test]
    fn ratio_and_kl_identities() {
        let a = net(1);
        let dr = draws(8, 2);
        let x0 = [1.0, 0.2];
        assert_eq!(awm_ratio(&a, &a, &x0, 1, &dr).unwrap(), 1.0);
        assert_eq!(awm_kl(&a, &a, &x0, 1, &dr, Weighting::Elbo).unwrap(), 0.0);
        assert!(awm_kl(&a, &net(2), &x0, 1, &dr, Weighting::Uniform).unwrap() > 0.0);
        // KL against the zero field is the weighted squared norm: quadratic scaling
        let k1 = awm_kl(&a, &ZeroField(2), &x0, 1, &dr, Weighting::Uniform).unwrap();
        assert!(k1 > 0.0);
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let a = net(3);
        let batch: Vec<TrainSample> = (0..4)
            .map(|i| TrainSample {
                x0: vec![i as f64 * 0.3, 1.0],
                class: 0,
                advantage: 0.0,
                policy: 0,
                trajectory: None,
                draws: draws(4, i),
            })
            .collect();
        let ctx = ObjectiveContext {
            net: &a,
            old: &[&a],
            reference: &a,
            params: ObjectiveParams {
                beta: 0.0,
                ..ObjectiveParams::default()
            },
        };
        let (stats, g) = AwmObjective.loss_and_grad(&ctx, &batch).unwrap();
        assert!(g.0.iter().all(|x| *x == 0.0));
        assert_eq!(stats.mean_ratio, 1.0);
        assert_eq!(stats.clip_fraction, 0.0);
    }
}
