//! Monte-Carlo verification of the variance identities of noisy-conditioned score targets.
//!
//! At a fixed anchor `x_t` the clean target is the kernel score given `x_0 ~ p(x_0 | x_t)` and
//! the noisy target is the kernel score given `x_s ~ p(x_s | x_0, x_t)`. Both are unbiased for
//! the marginal score, and the noisy one carries an extra isotropic covariance `kappa(s,t) I`.
//!
//! Second-moment checks draw `x_s` in antithetic pairs `mean +- sd z`: the pair midpoint is the
//! noisy score at the posterior mean of `x_s` (which must equal the clean score) and the pair
//! half-difference is the innovation. This keeps the estimators unbiased while removing the
//! cross-term noise that would otherwise dominate a 2% tolerance at `N = 10^6`.

mod suite;

pub use suite::{lemma1_mixture, run_verification_suite, write_reports_csv, SuiteOutcome, VerifyConfig, REPORT_COLUMNS};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analytic::GaussianMixture;
use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::sampler::{em_step_params, ei_step_params, StepParams};
use crate::schedule::{self, cond_score_clean, cond_score_noisy, posterior_xs_params};

/// How a report's estimate is compared with its reference value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    /// `|estimate - analytic| <= tol`.
    Within,
    /// `estimate >= analytic - tol`.
    AtLeast,
    /// Negative control: passes iff `|estimate - analytic| > tol`.
    MustFail,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub z: f64,
}

impl Tolerance {
    pub fn abs(abs: f64) -> Self {
        Self { abs, z: 0.0 }
    }

    /// Relative tolerance around `reference`, never below `floor`.
    pub fn rel(rel: f64, reference: f64, floor: f64, z: f64) -> Self {
        Self {
            abs: (rel * reference.abs()).max(floor),
            z,
        }
    }

    /// The threshold actually applied: `max(abs, z * stderr)`.
    pub fn threshold(&self, stderr: f64) -> f64 {
        self.abs.max(self.z * stderr)
    }
}

/// Where a check was evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub s: f64,
    pub t: f64,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCReport {
    pub quantity: String,
    pub s: f64,
    pub t: f64,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub analytic: f64,
    pub estimate: f64,
    pub stderr: f64,
    /// Threshold actually applied.
    pub tol: f64,
    pub pass: bool,
    pub check: Check,
}

impl MCReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        quantity: impl Into<String>,
        cell: Cell,
        n: usize,
        analytic: f64,
        estimate: f64,
        stderr: f64,
        tol: Tolerance,
        check: Check,
    ) -> Self {
        let thr = tol.threshold(stderr);
        let gap = (estimate - analytic).abs();
        let pass = match check {
            Check::Within => gap <= thr,
            Check::AtLeast => estimate >= analytic - thr,
            Check::MustFail => gap > thr,
        };
        Self {
            quantity: quantity.into(),
            s: cell.s,
            t: cell.t,
            d: cell.d,
            n,
            analytic,
            estimate,
            stderr,
            tol: thr,
            pass,
            check,
        }
    }

    pub fn within(
        quantity: impl Into<String>,
        cell: Cell,
        n: usize,
        analytic: f64,
        (estimate, stderr): (f64, f64),
        tol: Tolerance,
    ) -> Self {
        Self::new(quantity, cell, n, analytic, estimate, stderr, tol, Check::Within)
    }

    /// The same comparison recast as a negative control.
    pub fn negated(&self, quantity: impl Into<String>) -> Self {
        let mut r = self.clone();
        r.quantity = quantity.into();
        r.check = Check::MustFail;
        r.pass = !(r.estimate - r.analytic).abs().le(&r.tol);
        r
    }
}

/// Tolerances and constants shared by every check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOpts {
    /// z-score threshold for mean-type comparisons.
    pub z: f64,
    /// Relative tolerance on the clean covariance trace.
    pub rel_trace: f64,
    /// Relative tolerance on second-moment identities.
    pub rel_second: f64,
    /// Relative tolerance on fourth-moment identities.
    pub rel_fourth: f64,
    /// Absolute floor so exact zeros are not judged against a zero threshold.
    pub abs_floor: f64,
    /// Multiplier on the analytic `kappa`; anything but 1 is a deliberately wrong constant.
    pub kappa_scale: f64,
}

impl Default for VerifyOpts {
    fn default() -> Self {
        Self {
            z: 5.0,
            rel_trace: 0.01,
            rel_second: 0.02,
            rel_fourth: 0.05,
            abs_floor: 1e-9,
            kappa_scale: 1.0,
        }
    }
}

impl VerifyOpts {
    fn kappa(&self, s: f64, t: f64) -> Result<f64> {
        Ok(self.kappa_scale * schedule::kappa(s, t)?)
    }
}

/// Mean and standard error of i.i.d. values.
pub fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (m, f64::NAN);
    }
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn check_cell(op: &'static str, s: f64, t: f64, n: usize) -> Result<()> {
    if !(0.0 <= s && s < t && t > 0.0 && t < 1.0) {
        return Err(Error::domain(op, format!("need 0 <= s < t < 1, got s={s}, t={t}")));
    }
    if n < 2 {
        return Err(Error::EmptyBatch(op));
    }
    Ok(())
}

/// A fixed function of `(x_t, t)` whose regression risk against both targets is compared.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Zero,
    /// The exact marginal score.
    Score,
    /// The exact score plus a fixed offset vector.
    OffsetScore(Vec<f64>),
}

impl Predictor {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Score => "score",
            Self::OffsetScore(_) => "offset-score",
        }
    }

    pub fn eval(&self, gm: &GaussianMixture, xt: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            Self::Zero => Ok(vec![0.0; xt.len()]),
            Self::Score => gm.marginal_score(xt, t),
            Self::OffsetScore(off) => {
                check_dim("offset predictor", xt.len(), off.len())?;
                Ok(gm
                    .marginal_score(xt, t)?
                    .iter()
                    .zip(off)
                    .map(|(s, o)| s + o)
                    .collect())
            }
        }
    }
}

/// Antithetic draws of both targets at one anchor, stored row-major `n x d`.
#[derive(Debug, Clone)]
pub struct PairDraws {
    pub cell: Cell,
    pub n: usize,
    xt: Vec<f64>,
    /// Clean target per posterior draw of `x_0`.
    clean: Vec<f64>,
    /// Midpoint of the two noisy targets of a pair.
    mid: Vec<f64>,
    /// Half-difference of the two noisy targets of a pair.
    half: Vec<f64>,
}

impl PairDraws {
    pub fn draw<R: Rng + ?Sized>(
        gm: &GaussianMixture,
        xt: &[f64],
        s: f64,
        t: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_cell("pair draws", s, t, n)?;
        let d = gm.dim();
        let post = gm.posterior_x0_sampler(xt, t)?;
        let mut x0 = vec![0.0; d];
        let (mut clean, mut mid, mut half) = (
            Vec::with_capacity(n * d),
            Vec::with_capacity(n * d),
            Vec::with_capacity(n * d),
        );
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for _ in 0..n {
            post.sample_into(rng, &mut x0);
            let (mean, var) = posterior_xs_params(&x0, xt, s, t)?;
            let sd = var.sqrt();
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                plus[j] = mean[j] + sd * z;
                minus[j] = mean[j] - sd * z;
            }
            let c = cond_score_clean(xt, &x0, t)?;
            let np = cond_score_noisy(xt, &plus, s, t)?;
            let nm = cond_score_noisy(xt, &minus, s, t)?;
            clean.extend_from_slice(&c);
            for j in 0..d {
                mid.push(0.5 * (np[j] + nm[j]));
                half.push(0.5 * (np[j] - nm[j]));
            }
        }
        Ok(Self {
            cell: Cell { s, t, d },
            n,
            xt: xt.to_vec(),
            clean,
            mid,
            half,
        })
    }

    fn rows<'a>(&self, v: &'a [f64]) -> std::slice::ChunksExact<'a, f64> {
        v.chunks_exact(self.cell.d)
    }

    fn col_means(&self, v: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.cell.d];
        for r in self.rows(v) {
            for (m, x) in m.iter_mut().zip(r) {
                *m += x;
            }
        }
        m.iter_mut().for_each(|m| *m /= self.n as f64);
        m
    }

    /// Per-pair contributions to `Tr Cov(clean)`.
    fn clean_trace_terms(&self) -> Vec<f64> {
        let mc = self.col_means(&self.clean);
        self.rows(&self.clean)
            .map(|c| c.iter().zip(&mc).map(|(c, m)| (c - m).powi(2)).sum())
            .collect()
    }

    /// Per-pair contributions to `Tr Cov(noisy)` (both members of the pair).
    fn noisy_trace_terms(&self) -> Vec<f64> {
        let mp = self.col_means(&self.mid);
        self.rows(&self.mid)
            .zip(self.rows(&self.half))
            .map(|(p, h)| p.iter().zip(&mp).map(|(p, m)| (p - m).powi(2)).sum::<f64>() + sq(h))
            .collect()
    }

    /// `Tr Cov(clean | x_t)` with its standard error.
    pub fn clean_trace(&self) -> (f64, f64) {
        mean_se(&self.clean_trace_terms())
    }

    pub fn noisy_trace(&self) -> (f64, f64) {
        mean_se(&self.noisy_trace_terms())
    }

    /// `Tr Cov(noisy | x_t) - Tr Cov(clean | x_t)`, paired per posterior draw.
    pub fn trace_difference(&self) -> (f64, f64) {
        let diff: Vec<f64> = self
            .noisy_trace_terms()
            .iter()
            .zip(self.clean_trace_terms())
            .map(|(a, b)| a - b)
            .collect();
        mean_se(&diff)
    }

    /// Increment of the `(j, k)` covariance entry.
    pub fn cov_entry_difference(&self, j: usize, k: usize) -> (f64, f64) {
        let mc = self.col_means(&self.clean);
        let mp = self.col_means(&self.mid);
        let diff: Vec<f64> = self
            .rows(&self.clean)
            .zip(self.rows(&self.mid))
            .zip(self.rows(&self.half))
            .map(|((c, p), h)| {
                (p[j] - mp[j]) * (p[k] - mp[k]) + h[j] * h[k] - (c[j] - mc[j]) * (c[k] - mc[k])
            })
            .collect();
        mean_se(&diff)
    }

    fn losses(&self, a: &[f64]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let dist = |x: &mut dyn Iterator<Item = f64>| -> f64 { x.map(|v| v * v).sum() };
        let mut clean = Vec::with_capacity(self.n);
        let mut noisy = Vec::with_capacity(self.n);
        for ((c, p), h) in self.rows(&self.clean).zip(self.rows(&self.mid)).zip(self.rows(&self.half)) {
            clean.push(dist(&mut a.iter().zip(c).map(|(a, c)| a - c)));
            noisy.push([
                dist(&mut a.iter().zip(p).zip(h).map(|((a, p), h)| a - p - h)),
                dist(&mut a.iter().zip(p).zip(h).map(|((a, p), h)| a - p + h)),
            ]);
        }
        (clean, noisy)
    }

    /// `E|a - noisy|^2 - E|a - clean|^2`.
    pub fn risk_difference(&self, a: &[f64]) -> (f64, f64) {
        let (clean, noisy) = self.losses(a);
        let diff: Vec<f64> = clean
            .iter()
            .zip(&noisy)
            .map(|(c, [p, m])| 0.5 * (p + m) - c)
            .collect();
        mean_se(&diff)
    }

    /// Left side `Var(|a - noisy|^2)`, right side `Var(|a - clean|^2) + 2 d k^2 + 4 k E|a - clean|^2`
    /// for the supplied `kappa`, and the standard error of their difference.
    pub fn objective_variance(&self, a: &[f64], kappa: f64) -> ObjectiveVariance {
        let (clean, noisy) = self.losses(a);
        let n = self.n as f64;
        let mq = noisy.iter().map(|[p, m]| p + m).sum::<f64>() / (2.0 * n);
        let mr = clean.iter().sum::<f64>() / n;
        let d = self.cell.d as f64;
        let lhs_terms: Vec<f64> = noisy
            .iter()
            .map(|[p, m]| 0.5 * ((p - mq).powi(2) + (m - mq).powi(2)))
            .collect();
        let rhs_terms: Vec<f64> = clean
            .iter()
            .map(|r| (r - mr).powi(2) + 2.0 * d * kappa * kappa + 4.0 * kappa * r)
            .collect();
        let diff: Vec<f64> = lhs_terms.iter().zip(&rhs_terms).map(|(l, r)| l - r).collect();
        let lhs = mean_se(&lhs_terms);
        ObjectiveVariance {
            lhs: lhs.0,
            lhs_se: lhs.1,
            rhs: mean_se(&rhs_terms).0,
            diff_se: mean_se(&diff).1,
        }
    }

    pub fn xt(&self) -> &[f64] {
        &self.xt
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveVariance {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub diff_se: f64,
}

/// Both targets' MC means against the exact marginal score, per coordinate, plus their mutual
/// agreement. The two estimators use independent draws.
#[allow(clippy::too_many_arguments)]
pub fn verify_unbiasedness<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    xt: &[f64],
    s: f64,
    t: f64,
    n: usize,
    opts: &VerifyOpts,
    rng: &mut R,
) -> Result<Vec<MCReport>> {
    check_cell("verify_unbiasedness", s, t, n)?;
    let d = gm.dim();
    let post = gm.posterior_x0_sampler(xt, t)?;
    let score = gm.marginal_score(xt, t)?;
    let mut clean = vec![Vec::with_capacity(n); d];
    let mut noisy = vec![Vec::with_capacity(n); d];
    let mut x0 = vec![0.0; d];
    for _ in 0..n {
        post.sample_into(rng, &mut x0);
        for (col, v) in clean.iter_mut().zip(cond_score_clean(xt, &x0, t)?) {
            col.push(v);
        }
    }
    for _ in 0..n {
        post.sample_into(rng, &mut x0);
        let (mean, var) = posterior_xs_params(&x0, xt, s, t)?;
        let xs: Vec<f64> = mean
            .iter()
            .map(|m| m + var.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (col, v) in noisy.iter_mut().zip(cond_score_noisy(xt, &xs, s, t)?) {
            col.push(v);
        }
    }
    let cell = Cell { s, t, d };
    let tol = Tolerance {
        abs: opts.abs_floor,
        z: opts.z,
    };
    let mut out = Vec::new();
    for j in 0..d {
        let c = mean_se(&clean[j]);
        let m = mean_se(&noisy[j]);
        out.push(MCReport::within(format!("unbiased_clean[{j}]"), cell, n, score[j], c, tol));
        out.push(MCReport::within(format!("unbiased_noisy[{j}]"), cell, n, score[j], m, tol));
        out.push(MCReport::within(
            format!("unbiased_agree[{j}]"),
            cell,
            n,
            0.0,
            (c.0 - m.0, c.1.hypot(m.1)),
            tol,
        ));
    }
    Ok(out)
}

/// Clean and noisy covariance traces and their difference against `d kappa`; off-diagonal
/// increments against zero when `d > 1`.
#[allow(clippy::too_many_arguments)]
pub fn verify_cov_decomposition<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    xt: &[f64],
    s: f64,
    t: f64,
    n: usize,
    opts: &VerifyOpts,
    rng: &mut R,
) -> Result<Vec<MCReport>> {
    let draws = PairDraws::draw(gm, xt, s, t, n, rng)?;
    cov_decomposition_reports(gm, &draws, opts, rng)
}

pub(crate) fn cov_decomposition_reports<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    draws: &PairDraws,
    opts: &VerifyOpts,
    rng: &mut R,
) -> Result<Vec<MCReport>> {
    let Cell { s, t, d } = draws.cell;
    let n = draws.n;
    let dk = d as f64 * opts.kappa(s, t)?;
    let clean = draws.clean_trace();
    let reference = gm.clean_target_cov_trace(draws.xt(), t, n, rng)?;
    let cell = draws.cell;
    let mut out = vec![
        MCReport::within(
            "cov_trace_clean",
            cell,
            n,
            reference.value,
            (clean.0, clean.1.hypot(reference.stderr)),
            Tolerance::rel(opts.rel_trace, reference.value, opts.abs_floor, 0.0),
        ),
        MCReport::within(
            "cov_trace_noisy",
            cell,
            n,
            reference.value + dk,
            {
                let (v, se) = draws.noisy_trace();
                (v, se.hypot(reference.stderr))
            },
            Tolerance::rel(opts.rel_trace, reference.value + dk, opts.abs_floor, 0.0),
        ),
        trace_difference_report(draws, opts)?,
    ];
    for j in 0..d {
        for k in j + 1..d {
            out.push(MCReport::within(
                format!("cov_offdiag_diff[{j},{k}]"),
                cell,
                n,
                0.0,
                draws.cov_entry_difference(j, k),
                Tolerance {
                    abs: opts.abs_floor,
                    z: opts.z,
                },
            ));
        }
    }
    Ok(out)
}

pub(crate) fn trace_difference_report(draws: &PairDraws, opts: &VerifyOpts) -> Result<MCReport> {
    let Cell { s, t, d } = draws.cell;
    let dk = d as f64 * opts.kappa(s, t)?;
    Ok(MCReport::within(
        "cov_trace_diff",
        draws.cell,
        draws.n,
        dk,
        draws.trace_difference(),
        Tolerance::rel(opts.rel_second, dk, opts.abs_floor, 0.0),
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn verify_risk_inflation<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    a: &Predictor,
    xt: &[f64],
    s: f64,
    t: f64,
    n: usize,
    opts: &VerifyOpts,
    rng: &mut R,
) -> Result<MCReport> {
    let draws = PairDraws::draw(gm, xt, s, t, n, rng)?;
    risk_report(gm, &draws, a, opts)
}

pub(crate) fn risk_report(
    gm: &GaussianMixture,
    draws: &PairDraws,
    a: &Predictor,
    opts: &VerifyOpts,
) -> Result<MCReport> {
    let Cell { s, t, d } = draws.cell;
    let dk = d as f64 * opts.kappa(s, t)?;
    let av = a.eval(gm, draws.xt(), t)?;
    Ok(MCReport::within(
        format!("risk_diff[{}]", a.name()),
        draws.cell,
        draws.n,
        dk,
        draws.risk_difference(&av),
        Tolerance::rel(opts.rel_second, dk, opts.abs_floor, 0.0),
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn verify_objective_variance_inflation<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    a: &Predictor,
    xt: &[f64],
    s: f64,
    t: f64,
    n: usize,
    opts: &VerifyOpts,
    rng: &mut R,
) -> Result<MCReport> {
    let draws = PairDraws::draw(gm, xt, s, t, n, rng)?;
    objective_variance_report(gm, &draws, a, opts)
}

pub(crate) fn objective_variance_report(
    gm: &GaussianMixture,
    draws: &PairDraws,
    a: &Predictor,
    opts: &VerifyOpts,
) -> Result<MCReport> {
    let Cell { s, t, .. } = draws.cell;
    let av = a.eval(gm, draws.xt(), t)?;
    let ov = draws.objective_variance(&av, opts.kappa(s, t)?);
    Ok(MCReport::within(
        format!("objvar[{}]", a.name()),
        draws.cell,
        draws.n,
        ov.rhs,
        (ov.lhs, ov.diff_se),
        Tolerance::rel(opts.rel_fourth, ov.rhs, opts.abs_floor, 0.0),
    ))
}

/// The larger `s' in (s, t)` with `kappa(s', t) = factor * kappa(s, t)`.
pub fn s_scaling_kappa(s: f64, t: f64, factor: f64) -> Result<f64> {
    let target = factor * schedule::kappa(s, t)?;
    if !(factor > 1.0 && target > 0.0) {
        return Err(Error::domain("s_scaling_kappa", "need s > 0 and factor > 1"));
    }
    let (mut lo, mut hi) = (s, t);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if schedule::kappa(mid, t)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Affine score model `s(x) = W x + b` with `W` row-major `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineScore {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineScore {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| self.b[i] + (0..d).map(|j| self.w[i * d + j] * x[j]).sum::<f64>())
            .collect()
    }

    /// Parameters in gradient order: `W` row-major then `b`.
    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Exact marginal-score minimizer `W = -I / v`, `b = m / v` for a single Gaussian.
    pub fn optimum(gm: &GaussianMixture, t: f64) -> Result<Self> {
        let (m, v) = gaussian_marginal(gm, t)?;
        let d = m.len();
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = -1.0 / v;
        }
        Ok(Self {
            w,
            b: m.iter().map(|m| m / v).collect(),
        })
    }
}

fn gaussian_marginal(gm: &GaussianMixture, t: f64) -> Result<(Vec<f64>, f64)> {
    let [c] = gm.components() else {
        return Err(Error::Mixture("the affine gradient oracle needs a single Gaussian".into()));
    };
    Ok((
        c.mean.iter().map(|m| (1.0 - t) * m).collect(),
        (1.0 - t).powi(2) * c.var + t * t,
    ))
}

/// Exact gradient of `E|W x_t + b - grad log p_t(x_t)|^2` for a single-Gaussian mixture.
pub fn lemma1_analytic_gradient(gm: &GaussianMixture, model: &AffineScore, t: f64) -> Result<Vec<f64>> {
    let (m, v) = gaussian_marginal(gm, t)?;
    let d = m.len();
    check_dim("affine gradient", d, model.dim())?;
    let mut g = vec![0.0; model.num_params()];
    for i in 0..d {
        for j in 0..d {
            let mut e = v * model.w[i * d + j];
            e += (0..d).map(|k| model.w[i * d + k] * m[k]).sum::<f64>() * m[j];
            e += model.b[i] * m[j];
            if i == j {
                e += 1.0;
            }
            g[i * d + j] = 2.0 * e;
        }
        let wm: f64 = (0..d).map(|k| model.w[i * d + k] * m[k]).sum();
        g[d * d + i] = 2.0 * (wm + model.b[i]);
    }
    Ok(g)
}

/// MC gradient of the noisy denoising loss `E|W x_t + b - grad log p(x_t | x_s)|^2` over the
/// joint forward process, with per-component standard errors.
pub fn lemma1_mc_gradient<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    model: &AffineScore,
    s: f64,
    t: f64,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_cell("lemma1 gradient", s, t, n)?;
    let d = gm.dim();
    check_dim("affine gradient", d, model.dim())?;
    let p = model.num_params();
    let mut sum = vec![0.0; p];
    let mut sum2 = vec![0.0; p];
    let mut g = vec![0.0; p];
    let normal = |rng: &mut R| -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    for _ in 0..n {
        let (x0, _) = gm.sample(rng);
        let xs = schedule::forward_sample(&x0, s, &normal(rng))?;
        let xt = schedule::transition_sample(&xs, s, t, &normal(rng))?;
        let y = cond_score_noisy(&xt, &xs, s, t)?;
        let pred = model.eval(&xt);
        for i in 0..d {
            let r = 2.0 * (pred[i] - y[i]);
            for j in 0..d {
                g[i * d + j] = r * xt[j];
            }
            g[d * d + i] = r;
        }
        for k in 0..p {
            sum[k] += g[k];
            sum2[k] += g[k] * g[k];
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se = sum2
        .iter()
        .zip(&mean)
        .map(|(s2, m)| ((s2 / nf - m * m) * nf / (nf - 1.0) / nf).max(0.0).sqrt())
        .collect();
    Ok((mean, se))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(a, b)| a * b).sum();
    dot / (sq(a).sqrt() * sq(b).sqrt())
}

/// Cosine and norm ratio between the MC noisy-denoising gradient and the exact score-matching
/// gradient of an affine model.
#[allow(clippy::too_many_arguments)]
pub fn verify_lemma1_gradient<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    model: &AffineScore,
    s: f64,
    t: f64,
    n: usize,
    min_cosine: f64,
    opts: &VerifyOpts,
    rng: &mut R,
) -> Result<Vec<MCReport>> {
    let exact = lemma1_analytic_gradient(gm, model, t)?;
    let (mc, se) = lemma1_mc_gradient(gm, model, s, t, n, rng)?;
    let cell = Cell { s, t, d: gm.dim() };
    let norm = sq(&exact).sqrt();
    // delta-method error of |g_mc| / |g|
    let ratio_se = mc
        .iter()
        .zip(&se)
        .map(|(g, e)| (g * e).powi(2))
        .sum::<f64>()
        .sqrt()
        / (sq(&mc).sqrt() * norm);
    Ok(vec![
        MCReport::new(
            "lemma1_cosine",
            cell,
            n,
            1.0,
            cosine(&mc, &exact),
            0.0,
            Tolerance::abs(1.0 - min_cosine),
            Check::AtLeast,
        ),
        MCReport::within(
            "lemma1_norm_ratio",
            cell,
            n,
            1.0,
            (sq(&mc).sqrt() / norm, ratio_se),
            Tolerance {
                abs: opts.abs_floor,
                z: opts.z,
            },
        ),
    ])
}

/// Per-component z-checks that two MC gradient estimates agree (or one is zero).
pub fn gradient_component_reports(
    name: &str,
    cell: Cell,
    n: usize,
    (a, a_se): (&[f64], &[f64]),
    reference: Option<(&[f64], &[f64])>,
    opts: &VerifyOpts,
) -> Vec<MCReport> {
    (0..a.len())
        .map(|k| {
            let (r, r_se) = reference.map_or((0.0, 0.0), |(r, e)| (r[k], e[k]));
            MCReport::within(
                format!("{name}[{k}]"),
                cell,
                n,
                r,
                (a[k], a_se[k].hypot(r_se)),
                Tolerance {
                    abs: opts.abs_floor,
                    z: opts.z,
                },
            )
        })
        .collect()
}

/// A forward-process pair `(x_{t-dt}, x_t)` with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPair {
    pub x_prev: Vec<f64>,
    pub xt: Vec<f64>,
    pub class: usize,
}

/// Pairs from `x_0 ~ gm`, `x_{t-dt} = forward(x_0)`, `x_t = transition(x_{t-dt})`.
pub fn forward_pairs<R: Rng + ?Sized>(
    gm: &GaussianMixture,
    t: f64,
    dt: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ForwardPair>> {
    let s = t - dt;
    check_cell("forward pairs", s, t, n)?;
    let d = gm.dim();
    (0..n)
        .map(|_| {
            let (x0, class) = gm.sample(rng);
            let e1: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let e2: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let x_prev = schedule::forward_sample(&x0, s, &e1)?;
            let xt = schedule::transition_sample(&x_prev, s, t, &e2)?;
            Ok(ForwardPair { x_prev, xt, class })
        })
        .collect()
}

fn velocities(field: &dyn VelocityField, pairs: &[ForwardPair], t: f64) -> Result<Vec<Vec<f64>>> {
    let d = field.dim();
    let mut x = ndarray::Array2::zeros((pairs.len(), d));
    for (i, p) in pairs.iter().enumerate() {
        check_dim("forward pair", d, p.xt.len())?;
        for j in 0..d {
            x[[i, j]] = p.xt[j];
        }
    }
    let c: Vec<usize> = pairs.iter().map(|p| p.class).collect();
    let v = field.velocity(x.view(), &vec![t; pairs.len()], &c)?;
    Ok(v.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// `d(-log p(x_prev | x_t)) / dv` for a Gaussian step.
fn loglik_grad(p: &StepParams, pair: &ForwardPair, v: &[f64]) -> Vec<f64> {
    pair.x_prev
        .iter()
        .zip(&pair.xt)
        .zip(v)
        .map(|((y, x), v)| -p.coef_v * (y - p.coef_x * x - p.coef_v * v) / p.var())
        .collect()
}

/// The per-step likelihood of an exponential-integrator step is a denoising loss against the
/// noisy velocity target: `|x_prev - a x_t - b v|^2 = b^2 |v - v_target(x_prev, x_t)|^2`, and its
/// gradient is that of the denoising loss scaled by `b^2 / (2 var)`.
pub fn verify_theorem1_equivalence(
    field: &dyn VelocityField,
    pairs: &[ForwardPair],
    t: f64,
    dt: f64,
) -> Result<Vec<MCReport>> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("verify_theorem1_equivalence"));
    }
    let s = t - dt;
    let p = ei_step_params(t, dt)?;
    let v = velocities(field, pairs, t)?;
    let mut max_quad = 0.0f64;
    let mut ratios = Vec::with_capacity(pairs.len());
    let mut min_cos = 1.0f64;
    for (pair, v) in pairs.iter().zip(&v) {
        let target = schedule::noisy_velocity_target(&pair.x_prev, &pair.xt, s, t)?;
        let quad: f64 = pair
            .x_prev
            .iter()
            .zip(&pair.xt)
            .zip(v)
            .map(|((y, x), v)| (y - p.coef_x * x - p.coef_v * v).powi(2))
            .sum();
        let dsm: f64 = p.coef_v.powi(2) * v.iter().zip(&target).map(|(v, g)| (v - g).powi(2)).sum::<f64>();
        max_quad = max_quad.max((quad - dsm).abs() / quad.max(dsm));
        let g_ll = loglik_grad(&p, pair, v);
        let g_dsm: Vec<f64> = v.iter().zip(&target).map(|(v, g)| 2.0 * (v - g)).collect();
        ratios.push(sq(&g_ll).sqrt() / sq(&g_dsm).sqrt());
        min_cos = min_cos.min(cosine(&g_ll, &g_dsm));
    }
    let scale = p.coef_v.powi(2) / (2.0 * p.var());
    let spread = ratios
        .iter()
        .map(|r| (r - ratios[0]).abs() / ratios[0])
        .fold(0.0, f64::max);
    let cell = Cell { s, t, d: field.dim() };
    let n = pairs.len();
    let exact = Tolerance::abs(1e-10);
    Ok(vec![
        MCReport::within("thm1_quadratic_identity", cell, n, 0.0, (max_quad, 0.0), exact),
        MCReport::within("thm1_grad_ratio_spread", cell, n, 0.0, (spread, 0.0), exact),
        MCReport::within(
            "thm1_grad_scale",
            cell,
            n,
            scale,
            (ratios[0], 0.0),
            Tolerance::abs(1e-10 * scale),
        ),
        MCReport::within("thm1_grad_cosine", cell, n, 1.0, (min_cos, 0.0), exact),
    ])
}

/// Relative gap between Euler–Maruyama and exponential-integrator likelihood gradients,
/// `sum |g_em - g_ei| / sum |g_ei|`, on forward pairs at `(t, dt)`.
pub fn em_ei_gradient_gap(field: &dyn VelocityField, pairs: &[ForwardPair], t: f64, dt: f64) -> Result<f64> {
    let em = em_step_params(t, dt)?;
    let ei = ei_step_params(t, dt)?;
    let v = velocities(field, pairs, t)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (pair, v) in pairs.iter().zip(&v) {
        let a = loglik_grad(&em, pair, v);
        let b = loglik_grad(&ei, pair, v);
        num += a.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        den += sq(&b).sqrt();
    }
    Ok(num / den)
}

/// Convergence of the EM likelihood gradient to the EI one under repeated halving of `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmEiConvergence {
    pub report: MCReport,
    /// `(dt, gap)` per level.
    pub gaps: Vec<(f64, f64)>,
    /// Raw order `log2(gap(dt) / gap(dt/2))` per halving.
    pub orders: Vec<f64>,
}

const ORDER_BATCHES: usize = 8;

fn extrapolated_order(gaps: &[f64]) -> (f64, Vec<f64>) {
    let orders: Vec<f64> = gaps.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let k = orders.len();
    (2.0 * orders[k - 1] - orders[k - 2], orders)
}

/// Halves `dt` from `dt0` `levels - 1` times with common random numbers across levels.
///
/// The relative gap is `C dt (1 - c dt + ...)` with `c > 0`, so raw halving orders approach 1
/// from below and never reach it at finite `dt`. The reported order is the Richardson
/// extrapolation `2 p_fine - p_coarse` of the two finest halvings; its standard error comes from
/// batch means, and the check is the one-sided test `order >= 1 - z se`.
#[allow(clippy::too_many_arguments)]
pub fn verify_em_ei_convergence<R: Rng + ?Sized>(
    field: &dyn VelocityField,
    gm: &GaussianMixture,
    t: f64,
    dt0: f64,
    levels: usize,
    n: usize,
    z: f64,
    rng: &mut R,
) -> Result<EmEiConvergence> {
    if levels < 3 {
        return Err(Error::domain("verify_em_ei_convergence", "need at least three levels"));
    }
    if n < 2 * ORDER_BATCHES {
        return Err(Error::EmptyBatch("verify_em_ei_convergence"));
    }
    let d = gm.dim();
    let base: Vec<(Vec<f64>, usize, Vec<f64>, Vec<f64>)> = (0..n)
        .map(|_| {
            let (x0, c) = gm.sample(rng);
            let e1 = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let e2 = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            (x0, c, e1, e2)
        })
        .collect();
    let per = n / ORDER_BATCHES;
    let mut gaps = Vec::with_capacity(levels);
    let mut batch_gaps = vec![Vec::with_capacity(levels); ORDER_BATCHES];
    let mut dt = dt0;
    for _ in 0..levels {
        let s = t - dt;
        let pairs = base
            .iter()
            .map(|(x0, c, e1, e2)| {
                let x_prev = schedule::forward_sample(x0, s, e1)?;
                let xt = schedule::transition_sample(&x_prev, s, t, e2)?;
                Ok(ForwardPair { x_prev, xt, class: *c })
            })
            .collect::<Result<Vec<_>>>()?;
        gaps.push((dt, em_ei_gradient_gap(field, &pairs, t, dt)?));
        for (b, g) in batch_gaps.iter_mut().enumerate() {
            g.push(em_ei_gradient_gap(field, &pairs[b * per..(b + 1) * per], t, dt)?);
        }
        dt *= 0.5;
    }
    let (order, orders) = extrapolated_order(&gaps.iter().map(|g| g.1).collect::<Vec<_>>());
    let batch: Vec<f64> = batch_gaps.iter().map(|g| extrapolated_order(g).0).collect();
    let (_, batch_se) = mean_se(&batch);
    let report = MCReport::new(
        "em_ei_order",
        Cell { s: t - dt0, t, d },
        n,
        1.0,
        order,
        batch_se,
        Tolerance { abs: 0.0, z },
        Check::AtLeast,
    );
    Ok(EmEiConvergence { report, gaps, orders })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Arch, VelocityNet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn std1() -> GaussianMixture {
        GaussianMixture::preset("std-normal-1d").unwrap()
    }

    #[test]
    fn report_pass_rule() {
        let c = Cell { s: 0.1, t: 0.5, d: 1 };
        let tol = Tolerance { abs: 0.01, z: 5.0 };
        assert!(MCReport::within("q", c, 10, 1.0, (1.009, 0.0), tol).pass);
        assert!(!MCReport::within("q", c, 10, 1.0, (1.02, 0.001), tol).pass);
        // the z-band wins when wider
        let r = MCReport::within("q", c, 10, 1.0, (1.02, 0.005), tol);
        assert!(r.pass && (r.tol - 0.025).abs() < 1e-15);
        assert!(!MCReport::within("q", c, 10, 1.0, (f64::NAN, 0.0), tol).pass);
        let neg = MCReport::within("q", c, 10, 1.0, (1.02, 0.001), tol).negated("nq");
        assert!(neg.pass && neg.check == Check::MustFail);
        assert!(MCReport::new("o", c, 1, 1.0, 1.3, 0.0, Tolerance::abs(0.0), Check::AtLeast).pass);
        assert!(!MCReport::new("o", c, 1, 1.0, 0.9, 0.0, Tolerance::abs(0.0), Check::AtLeast).pass);
    }

    #[test]
    fn pair_midpoint_is_the_clean_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gm = GaussianMixture::preset("ring-8").unwrap();
        let d = PairDraws::draw(&gm, &[0.7, -0.2], 0.3, 0.6, 500, &mut rng).unwrap();
        for (c, m) in d.clean.iter().zip(&d.mid) {
            assert!((c - m).abs() < 1e-9 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn small_sample_checks_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let opts = VerifyOpts::default();
        let gm = std1();
        for r in verify_unbiasedness(&gm, &[0.4], 0.25, 0.5, 20_000, &opts, &mut rng).unwrap() {
            assert!(r.pass, "{r:?}");
        }
        let loose = VerifyOpts {
            rel_trace: 0.05,
            rel_second: 0.1,
            rel_fourth: 0.2,
            ..opts
        };
        for r in verify_cov_decomposition(&gm, &[0.4], 0.25, 0.5, 20_000, &loose, &mut rng).unwrap() {
            assert!(r.pass, "{r:?}");
        }
        let r = verify_risk_inflation(&gm, &Predictor::Zero, &[0.4], 0.25, 0.5, 20_000, &loose, &mut rng)
            .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn s_zero_draws_have_no_inflation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = PairDraws::draw(&std1(), &[0.3], 0.0, 0.5, 1000, &mut rng).unwrap();
        assert!(d.trace_difference().0.abs() < 1e-12);
        assert!(d.risk_difference(&[0.1]).0.abs() < 1e-12);
    }

    #[test]
    fn affine_optimum_zeroes_the_exact_gradient() {
        let gm = GaussianMixture::single(vec![0.5, -0.3], 0.8).unwrap();
        let opt = AffineScore::optimum(&gm, 0.4).unwrap();
        let g = lemma1_analytic_gradient(&gm, &opt, 0.4).unwrap();
        assert!(g.iter().all(|g| g.abs() < 1e-12), "{g:?}");
        assert!(lemma1_analytic_gradient(&GaussianMixture::preset("ring-8").unwrap(), &opt, 0.4).is_err());
    }

    #[test]
    fn affine_gradient_matches_finite_differences_of_exact_risk() {
        // risk = E|W x + b + (x - m)/v|^2 for x ~ N(m, v I), in closed form
        let gm = GaussianMixture::single(vec![0.5, -0.3], 0.8).unwrap();
        let t = 0.4;
        let (m, v) = gaussian_marginal(&gm, t).unwrap();
        let risk = |a: &AffineScore| -> f64 {
            // A = W + I/v, c = b - m/v; E|A x + c|^2 = v |A|_F^2 + |A m + c|^2
            let d = 2;
            let mut fro = 0.0;
            let mut mean = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    let aij = a.w[i * d + j] + if i == j { 1.0 / v } else { 0.0 };
                    fro += aij * aij;
                    mean[i] += aij * m[j];
                }
                mean[i] += a.b[i] - m[i] / v;
            }
            v * fro + sq(&mean)
        };
        let model = AffineScore {
            w: vec![0.1, -0.2, 0.05, 0.3],
            b: vec![0.2, -0.1],
        };
        let g = lemma1_analytic_gradient(&gm, &model, t).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut p = model.clone();
            let mut q = model.clone();
            if k < 4 {
                p.w[k] += h;
                q.w[k] -= h;
            } else {
                p.b[k - 4] += h;
                q.b[k - 4] -= h;
            }
            let fd = (risk(&p) - risk(&q)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6, "param {k}: fd {fd} exact {}", g[k]);
        }
    }

    #[test]
    fn theorem1_identity_holds_for_a_random_net() {
        let gm = GaussianMixture::preset("ring-8").unwrap();
        let net = VelocityNet::init(
            Arch {
                dim: 2,
                hidden: vec![16],
                num_classes: 8,
                embed_dim: 2,
                time_features: 4,
            },
            9,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = forward_pairs(&gm, 0.5, 0.25, 200, &mut rng).unwrap();
        for r in verify_theorem1_equivalence(&net, &pairs, 0.5, 0.25).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn kappa_doubling_point() {
        let s2 = s_scaling_kappa(0.25, 0.5, 2.0).unwrap();
        let k = schedule::kappa(0.25, 0.5).unwrap();
        assert!((schedule::kappa(s2, 0.5).unwrap() - 2.0 * k).abs() < 1e-10);
        assert!(s2 > 0.25 && s2 < 0.5);
    }
}
