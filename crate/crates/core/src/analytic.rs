//! Isotropic Gaussian mixtures with exact marginal scores and optimal velocities under the
//! flow forward process. These are the ground truth every statistical check compares against.
//!
//! Under `x_t = (1-t) x_0 + t eps` a component `N(mu, var I)` becomes
//! `N((1-t) mu, ((1-t)^2 var + t^2) I)`, so the marginal at any `t` is again a mixture and the
//! posterior `x_0 | x_t` is a mixture of conjugate Gaussians.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::erf::erfc;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance, may be zero.
    pub var: f64,
    #[serde(default)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
}

pub const PRESETS: &[&str] = &["std-normal-1d", "std-normal-2d", "two-mode-1d", "ring-8"];

/// Per-component posterior of `x_0` given `x_t`.
#[derive(Debug, Clone)]
struct ComponentPosterior {
    log_resp: f64,
    mean: Vec<f64>,
    var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovTraceMethod {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovTrace {
    pub value: f64,
    /// Zero on the analytic path.
    pub stderr: f64,
    pub method: CovTraceMethod,
}

/// Draws from the mixture posterior `x_0 | x_t` at a fixed `x_t`.
#[derive(Debug, Clone)]
pub struct PosteriorX0 {
    cum: Vec<f64>,
    means: Vec<Vec<f64>>,
    sds: Vec<f64>,
}

impl PosteriorX0 {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.means[0].len()];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        let k = self.cum.iter().position(|c| u < *c).unwrap_or(self.cum.len() - 1);
        for (o, m) in out.iter_mut().zip(&self.means[k]) {
            *o = m + self.sds[k] * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Mixture("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Mixture("zero-dimensional component".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Mixture(format!("component {i}: weight must be positive")));
            }
            if !(c.var >= 0.0 && c.var.is_finite()) {
                return Err(Error::Mixture(format!("component {i}: variance must be >= 0")));
            }
            if c.mean.len() != dim {
                return Err(Error::Mixture(format!(
                    "component {i}: dimension {} differs from {dim}",
                    c.mean.len()
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Mixture(format!("component {i}: non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Mixture(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    pub fn single(mean: Vec<f64>, var: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            var,
            class: None,
        }])
    }

    /// Ring of `n` equal-weight modes in 2D, one class label per mode.
    pub fn ring(n: usize, radius: f64, var: f64) -> Result<Self> {
        let components = (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Component {
                    weight: 1.0 / n as f64,
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    var,
                    class: Some(k),
                }
            })
            .collect();
        Self::new(components)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "std-normal-1d" => Self::single(vec![0.0], 1.0),
            "std-normal-2d" => Self::single(vec![0.0, 0.0], 1.0),
            "two-mode-1d" => Self::new(vec![
                Component {
                    weight: 0.5,
                    mean: vec![-2.0],
                    var: 0.05,
                    class: Some(0),
                },
                Component {
                    weight: 0.5,
                    mean: vec![2.0],
                    var: 0.05,
                    class: Some(1),
                },
            ]),
            "ring-8" => Self::ring(8, 2.0, 0.02),
            other => Err(Error::Mixture(format!(
                "unknown preset '{other}' (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn num_classes(&self) -> usize {
        self.components
            .iter()
            .filter_map(|c| c.class)
            .max()
            .map_or(1, |m| m + 1)
    }

    /// Sub-mixture of the components labelled `class`, reweighted to sum to one.
    pub fn conditional(&self, class: usize) -> Result<Self> {
        let picked: Vec<&Component> = self
            .components
            .iter()
            .filter(|c| c.class.unwrap_or(0) == class)
            .collect();
        if picked.is_empty() {
            return Err(Error::Mixture(format!("no component with class {class}")));
        }
        let total: f64 = picked.iter().map(|c| c.weight).sum();
        let mut components: Vec<Component> = picked
            .into_iter()
            .map(|c| Component {
                weight: c.weight / total,
                ..c.clone()
            })
            .collect();
        // absorb rounding so the sum-to-one check holds
        let s: f64 = components.iter().map(|c| c.weight).sum();
        components[0].weight += 1.0 - s;
        Self::new(components)
    }

    /// Draw `(x0, class)`; components without a label report class 0.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        let sd = c.var.sqrt();
        let x = c
            .mean
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, c.class.unwrap_or(0))
    }

    /// Draw from the marginal of `x_t`.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<Vec<f64>> {
        let (x0, _) = self.sample(rng);
        let eps: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        schedule::forward_sample(&x0, t, &eps)
    }

    fn marginal_var(c: &Component, t: f64) -> f64 {
        (1.0 - t).powi(2) * c.var + t * t
    }

    fn log_joint(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let v = Self::marginal_var(c, t);
                if v <= 0.0 {
                    return Err(Error::domain(
                        "mixture marginal",
                        format!("component with zero variance at t={t}"),
                    ));
                }
                let r2: f64 = xt
                    .iter()
                    .zip(&c.mean)
                    .map(|(x, m)| (x - (1.0 - t) * m).powi(2))
                    .sum();
                Ok(c.weight.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * r2 / v)
            })
            .collect()
    }

    pub fn marginal_log_density(&self, xt: &[f64], t: f64) -> Result<f64> {
        check_dim("marginal_log_density", self.dim, xt.len())?;
        if !(0.0..1.0).contains(&t) {
            return Err(Error::domain("marginal_log_density", format!("t={t} outside [0,1)")));
        }
        Ok(log_sum_exp(&self.log_joint(xt, t)?))
    }

    /// Exact `grad log p_t(x_t)` for `t in [0, 1)`.
    pub fn marginal_score(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim("marginal_score", self.dim, xt.len())?;
        if !(0.0..1.0).contains(&t) {
            return Err(Error::domain("marginal_score", format!("t={t} outside [0,1)")));
        }
        let lj = self.log_joint(xt, t)?;
        let lse = log_sum_exp(&lj);
        let mut out = vec![0.0; self.dim];
        for (c, l) in self.components.iter().zip(&lj) {
            let r = (l - lse).exp();
            let v = Self::marginal_var(c, t);
            for ((o, x), m) in out.iter_mut().zip(xt).zip(&c.mean) {
                *o -= r * (x - (1.0 - t) * m) / v;
            }
        }
        Ok(out)
    }

    fn posteriors(&self, xt: &[f64], t: f64) -> Result<Vec<ComponentPosterior>> {
        let lj = self.log_joint(xt, t)?;
        let lse = log_sum_exp(&lj);
        Ok(self
            .components
            .iter()
            .zip(&lj)
            .map(|(c, l)| {
                let v = Self::marginal_var(c, t);
                let gain = c.var * (1.0 - t) / v;
                let mean = c
                    .mean
                    .iter()
                    .zip(xt)
                    .map(|(m, x)| m + gain * (x - (1.0 - t) * m))
                    .collect();
                ComponentPosterior {
                    log_resp: l - lse,
                    mean,
                    var: c.var * t * t / v,
                }
            })
            .collect())
    }

    fn check_open_unit(op: &'static str, t: f64) -> Result<()> {
        if !(t > schedule::ENDPOINT_EPS && t < 1.0 - schedule::ENDPOINT_EPS) {
            return Err(Error::domain(op, format!("t={t} outside (0,1)")));
        }
        Ok(())
    }

    /// `E[x_0 | x_t]`.
    pub fn posterior_mean_x0(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim("posterior_mean_x0", self.dim, xt.len())?;
        Self::check_open_unit("posterior_mean_x0", t)?;
        let mut out = vec![0.0; self.dim];
        for p in self.posteriors(xt, t)? {
            let r = p.log_resp.exp();
            for (o, m) in out.iter_mut().zip(&p.mean) {
                *o += r * m;
            }
        }
        Ok(out)
    }

    /// Optimal flow-matching velocity `E[eps - x_0 | x_t]`.
    pub fn marginal_velocity(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        Self::check_open_unit("marginal_velocity", t)?;
        let m = self.posterior_mean_x0(xt, t)?;
        Ok(xt
            .iter()
            .zip(&m)
            .map(|(x, m)| (x - (1.0 - t) * m) / t - m)
            .collect())
    }

    /// Exact draw from `p(x_0 | x_t)`.
    pub fn posterior_x0<R: Rng + ?Sized>(
        &self,
        xt: &[f64],
        t: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        Ok(self.posterior_x0_sampler(xt, t)?.sample(rng))
    }

    /// Precomputed `p(x_0 | x_t)` for repeated draws at one `x_t`.
    pub fn posterior_x0_sampler(&self, xt: &[f64], t: f64) -> Result<PosteriorX0> {
        check_dim("posterior_x0", self.dim, xt.len())?;
        Self::check_open_unit("posterior_x0", t)?;
        let posts = self.posteriors(xt, t)?;
        let mut acc = 0.0;
        let cum = posts
            .iter()
            .map(|p| {
                acc += p.log_resp.exp();
                acc
            })
            .collect();
        Ok(PosteriorX0 {
            cum,
            sds: posts.iter().map(|p| p.var.sqrt()).collect(),
            means: posts.into_iter().map(|p| p.mean).collect(),
        })
    }

    /// Quantile of the 1D marginal at `t` by bisection on the mixture CDF.
    pub fn marginal_quantile_1d(&self, p: f64, t: f64) -> Result<f64> {
        check_dim("marginal_quantile_1d", 1, self.dim)?;
        Self::check_open_unit("marginal_quantile_1d", t)?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain("marginal_quantile_1d", format!("p={p} outside (0,1)")));
        }
        let cdf = |x: f64| -> f64 {
            self.components
                .iter()
                .map(|c| {
                    let sd = Self::marginal_var(c, t).sqrt();
                    c.weight * 0.5 * erfc(-(x - (1.0 - t) * c.mean[0]) / (sd * std::f64::consts::SQRT_2))
                })
                .sum()
        };
        let (mut lo, mut hi) = (-1.0, 1.0);
        while cdf(lo) > p {
            lo *= 2.0;
        }
        while cdf(hi) < p {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Posterior component probabilities `p(i | x_t)`.
    pub fn responsibilities(&self, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim("responsibilities", self.dim, xt.len())?;
        Self::check_open_unit("responsibilities", t)?;
        Ok(self
            .posteriors(xt, t)?
            .iter()
            .map(|p| p.log_resp.exp())
            .collect())
    }

    /// `Tr Cov(grad log p(x_t | x_0) | x_t)`: closed form for a single component, Monte-Carlo
    /// with `n_mc` posterior draws otherwise.
    pub fn clean_target_cov_trace<R: Rng + ?Sized>(
        &self,
        xt: &[f64],
        t: f64,
        n_mc: usize,
        rng: &mut R,
    ) -> Result<CovTrace> {
        check_dim("clean_target_cov_trace", self.dim, xt.len())?;
        Self::check_open_unit("clean_target_cov_trace", t)?;
        if let [c] = self.components.as_slice() {
            let d = self.dim as f64;
            let value = d * (1.0 - t).powi(2) * c.var / (t * t * Self::marginal_var(c, t));
            return Ok(CovTrace {
                value,
                stderr: 0.0,
                method: CovTraceMethod::Analytic,
            });
        }
        self.clean_target_cov_trace_mc(xt, t, n_mc, rng)
    }

    /// Monte-Carlo path of [`Self::clean_target_cov_trace`], available for any mixture.
    pub fn clean_target_cov_trace_mc<R: Rng + ?Sized>(
        &self,
        xt: &[f64],
        t: f64,
        n_mc: usize,
        rng: &mut R,
    ) -> Result<CovTrace> {
        if n_mc < 2 {
            return Err(Error::EmptyBatch("clean_target_cov_trace_mc"));
        }
        let mut scores = Vec::with_capacity(n_mc);
        let mut mean = vec![0.0; self.dim];
        for _ in 0..n_mc {
            let x0 = self.posterior_x0(xt, t, rng)?;
            let s = schedule::cond_score_clean(xt, &x0, t)?;
            for (m, s) in mean.iter_mut().zip(&s) {
                *m += s / n_mc as f64;
            }
            scores.push(s);
        }
        let n = n_mc as f64;
        let sq: Vec<f64> = scores.iter().map(|s| sq_dist(s, &mean)).collect();
        let value = sq.iter().sum::<f64>() / (n - 1.0);
        let m = sq.iter().sum::<f64>() / n;
        let var = sq.iter().map(|q| (q - m).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(CovTrace {
            value,
            stderr: (var / n).sqrt(),
            method: CovTraceMethod::MonteCarlo,
        })
    }
}
