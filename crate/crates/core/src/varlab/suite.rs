//! The full verification grid: presets x (s, t) cells x anchors, plus the affine-model gradient
//! check, the step-likelihood identities and negative controls with a deliberately wrong kappa.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    cov_decomposition_reports, forward_pairs, gradient_component_reports, lemma1_analytic_gradient,
    lemma1_mc_gradient, objective_variance_report, risk_report, s_scaling_kappa, trace_difference_report,
    verify_em_ei_convergence, verify_lemma1_gradient, verify_theorem1_equivalence, verify_unbiasedness,
    AffineScore, Cell, Check, MCReport, PairDraws, Predictor, Tolerance, VerifyOpts,
};
use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::net::{Arch, VelocityNet};

pub const REPORT_COLUMNS: [&str; 11] = [
    "quantity", "s", "t", "d", "N", "analytic", "estimate", "stderr", "tol", "pass", "check",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Posterior draws (antithetic pairs for second moments) per check.
    pub n: usize,
    pub seed: u64,
    pub presets: Vec<String>,
    /// `(s, t)` cells with `0 < s < t < 1`.
    pub cells: Vec<[f64; 2]>,
    /// Anchors per cell: marginal quantiles in 1D, fixed-seed marginal draws otherwise.
    pub anchors: usize,
    pub z: f64,
    pub rel_tol_trace: f64,
    pub rel_tol_second: f64,
    pub rel_tol_fourth: f64,
    pub abs_floor: f64,
    /// Scale of the fixed random offset of the offset-score predictor.
    pub offset_scale: f64,
    /// Also evaluate every cell at `s = 0`, where no inflation is expected.
    pub s0_controls: bool,
    pub lemma1: bool,
    pub lemma1_min_cosine: f64,
    pub theorem1: bool,
    pub theorem1_pairs: usize,
    /// `(t, dt)` of the step-likelihood identities.
    pub theorem1_step: [f64; 2],
    /// Negative controls with kappa off by 10%; these must fail for the suite to pass.
    pub self_tests: bool,
    /// Run every check with kappa multiplied by this factor (a broken build must fail).
    pub corrupt_kappa: Option<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n: 1_000_000,
            seed: 0,
            presets: vec!["std-normal-1d".into()],
            cells: vec![[0.25, 0.5], [0.5, 0.8]],
            anchors: 10,
            z: 5.0,
            rel_tol_trace: 0.01,
            rel_tol_second: 0.02,
            rel_tol_fourth: 0.05,
            abs_floor: 1e-9,
            offset_scale: 0.5,
            s0_controls: true,
            lemma1: true,
            lemma1_min_cosine: 0.999,
            theorem1: true,
            theorem1_pairs: 1000,
            theorem1_step: [0.5, 0.25],
            self_tests: true,
            corrupt_kappa: None,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("verify: {m}")));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.anchors == 0 {
            return bad("anchors must be positive");
        }
        for name in &self.presets {
            GaussianMixture::preset(name)?;
        }
        for [s, t] in &self.cells {
            if !(*s > 0.0 && s < t && *t < 1.0) {
                return bad(&format!("cell (s={s}, t={t}) needs 0 < s < t < 1"));
            }
        }
        let [t, dt] = self.theorem1_step;
        if !(dt > 0.0 && dt < t && t < 1.0) {
            return bad("theorem1_step needs 0 < dt < t < 1");
        }
        if !(self.z > 0.0) || self.rel_tol_trace < 0.0 || self.rel_tol_second < 0.0 || self.rel_tol_fourth < 0.0 {
            return bad("tolerances must be non-negative and z positive");
        }
        if let Some(k) = self.corrupt_kappa {
            if !(k > 0.0) {
                return bad("corrupt_kappa must be positive");
            }
        }
        Ok(())
    }

    pub fn opts(&self) -> VerifyOpts {
        VerifyOpts {
            z: self.z,
            rel_trace: self.rel_tol_trace,
            rel_second: self.rel_tol_second,
            rel_fourth: self.rel_tol_fourth,
            abs_floor: self.abs_floor,
            kappa_scale: self.corrupt_kappa.unwrap_or(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub reports: Vec<MCReport>,
}

impl SuiteOutcome {
    pub fn all_pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &MCReport> {
        self.reports.iter().filter(|r| !r.pass)
    }
}

/// Each check gets its own stream so reports are reproducible and independent of ordering.
struct Streams {
    seed: u64,
    next: u64,
}

impl Streams {
    fn next(&mut self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.next);
        self.next += 1;
        rng
    }
}

fn anchors(gm: &GaussianMixture, t: f64, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if gm.dim() == 1 {
        (0..k)
            .map(|i| Ok(vec![gm.marginal_quantile_1d((i as f64 + 0.5) / k as f64, t)?]))
            .collect()
    } else {
        (0..k).map(|_| gm.sample_marginal(t, rng)).collect()
    }
}

fn tag(mut r: MCReport, suffix: &str) -> MCReport {
    r.quantity = format!("{}@{suffix}", r.quantity);
    r
}

pub fn run_verification_suite(cfg: &VerifyConfig) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let opts = cfg.opts();
    let wrong = VerifyOpts {
        kappa_scale: 1.1 * opts.kappa_scale,
        ..opts
    };
    let mut streams = Streams {
        seed: cfg.seed,
        next: 0,
    };
    let mut reports = Vec::new();
    for name in &cfg.presets {
        let gm = GaussianMixture::preset(name)?;
        let d = gm.dim();
        let offset: Vec<f64> = {
            let mut rng = streams.next();
            (0..d)
                .map(|_| cfg.offset_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let predictors = [Predictor::Zero, Predictor::Score, Predictor::OffsetScore(offset)];
        for &[s, t] in &cfg.cells {
            let xts = anchors(&gm, t, cfg.anchors, &mut streams.next())?;
            let s_double = s_scaling_kappa(s, t, 2.0)?;
            for (ai, xt) in xts.iter().enumerate() {
                let at = format!("{name}#{ai}");
                for r in verify_unbiasedness(&gm, xt, s, t, cfg.n, &opts, &mut streams.next())? {
                    reports.push(tag(r, &at));
                }
                let mut rng = streams.next();
                let draws = PairDraws::draw(&gm, xt, s, t, cfg.n, &mut rng)?;
                for r in cov_decomposition_reports(&gm, &draws, &opts, &mut rng)? {
                    reports.push(tag(r, &at));
                }
                let wider = PairDraws::draw(&gm, xt, s_double, t, cfg.n, &mut streams.next())?;
                for a in &predictors {
                    reports.push(tag(risk_report(&gm, &draws, a, &opts)?, &at));
                    reports.push(tag(objective_variance_report(&gm, &draws, a, &opts)?, &at));
                    let av = a.eval(&gm, xt, t)?;
                    let lo = draws.objective_variance(&av, opts.kappa(s, t)?);
                    let hi = wider.objective_variance(&av, opts.kappa(s_double, t)?);
                    let se = lo.lhs_se.hypot(hi.lhs_se);
                    reports.push(tag(
                        MCReport::new(
                            format!("objvar_increase_z[{}]", a.name()),
                            Cell { s: s_double, t, d },
                            cfg.n,
                            cfg.z,
                            (hi.lhs - lo.lhs) / se,
                            1.0,
                            Tolerance::abs(0.0),
                            Check::AtLeast,
                        ),
                        &at,
                    ));
                }
                if cfg.s0_controls {
                    let zero = PairDraws::draw(&gm, xt, 0.0, t, cfg.n, &mut streams.next())?;
                    reports.push(tag(trace_difference_report(&zero, &opts)?, &format!("{at}/s0")));
                    for a in &predictors {
                        reports.push(tag(risk_report(&gm, &zero, a, &opts)?, &format!("{at}/s0")));
                        reports.push(tag(objective_variance_report(&gm, &zero, a, &opts)?, &format!("{at}/s0")));
                    }
                }
                if cfg.self_tests && ai == 0 {
                    let r = trace_difference_report(&draws, &wrong)?;
                    reports.push(tag(r.negated("selftest:cov_trace_diff"), &at));
                    let r = risk_report(&gm, &draws, &predictors[0], &wrong)?;
                    reports.push(tag(r.negated("selftest:risk_diff[zero]"), &at));
                }
            }
        }
    }
    if cfg.lemma1 {
        reports.extend(lemma1_reports(cfg, &opts, &mut streams)?);
    }
    if cfg.theorem1 {
        reports.extend(theorem1_reports(cfg, &mut streams)?);
    }
    Ok(SuiteOutcome { reports })
}

/// Non-centred 2D Gaussian so that both `W` and `b` carry signal.
pub fn lemma1_mixture() -> GaussianMixture {
    GaussianMixture::single(vec![0.5, -0.3], 0.8).expect("valid mixture")
}

fn lemma1_reports(cfg: &VerifyConfig, opts: &VerifyOpts, streams: &mut Streams) -> Result<Vec<MCReport>> {
    let gm = lemma1_mixture();
    let mut out = Vec::new();
    let mut rng = streams.next();
    let model = AffineScore {
        w: (0..4).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
        b: (0..2).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    for &[s, t] in &cfg.cells {
        let at = format!("affine/t={t}");
        for r in verify_lemma1_gradient(&gm, &model, s, t, cfg.n, cfg.lemma1_min_cosine, opts, &mut streams.next())? {
            out.push(tag(r, &at));
        }
        let cell = Cell { s, t, d: 2 };
        let opt = AffineScore::optimum(&gm, t)?;
        debug_assert!(lemma1_analytic_gradient(&gm, &opt, t)?.iter().all(|g| g.abs() < 1e-9));
        let (g, se) = lemma1_mc_gradient(&gm, &opt, s, t, cfg.n, &mut streams.next())?;
        for r in gradient_component_reports("lemma1_grad_at_optimum", cell, cfg.n, (&g, &se), None, opts) {
            out.push(tag(r, &at));
        }
        let (g0, se0) = lemma1_mc_gradient(&gm, &model, 0.0, t, cfg.n, &mut streams.next())?;
        let (gs, ses) = lemma1_mc_gradient(&gm, &model, s, t, cfg.n, &mut streams.next())?;
        for r in gradient_component_reports(
            "lemma1_s0_vs_s",
            cell,
            cfg.n,
            (&g0, &se0),
            Some((&gs, &ses)),
            opts,
        ) {
            out.push(tag(r, &at));
        }
    }
    Ok(out)
}

fn theorem1_reports(cfg: &VerifyConfig, streams: &mut Streams) -> Result<Vec<MCReport>> {
    let mut out = Vec::new();
    let [t, dt] = cfg.theorem1_step;
    for name in &cfg.presets {
        let gm = GaussianMixture::preset(name)?;
        let net = VelocityNet::init(
            Arch {
                dim: gm.dim(),
                hidden: vec![32, 32],
                num_classes: gm.num_classes(),
                embed_dim: 4,
                time_features: 8,
            },
            cfg.seed,
        )?;
        let pairs = forward_pairs(&gm, t, dt, cfg.theorem1_pairs, &mut streams.next())?;
        for r in verify_theorem1_equivalence(&net, &pairs, t, dt)? {
            out.push(tag(r, name));
        }
        let conv = verify_em_ei_convergence(&net, &gm, t, 0.05, 7, cfg.theorem1_pairs, cfg.z, &mut streams.next())?;
        out.push(tag(conv.report, name));
    }
    Ok(out)
}

/// Writes the report table with a leading schema line.
pub fn write_reports_csv(path: &Path, reports: &[MCReport]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# schema: varlab-report v1").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
