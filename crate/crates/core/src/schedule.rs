//! Closed-form quantities of the linear flow forward process
//! `x_t = (1 - t) x_0 + t eps`, `t in [0, 1]`.
//!
//! For `0 <= s < t <= 1` the process has a Gaussian transition kernel
//!
//! ```text
//! x_t | x_s ~ N(alpha(s,t) x_s, sigma2(s,t) I)
//! alpha(s,t)  = (1 - t) / (1 - s)
//! sigma2(s,t) = t^2 - alpha(s,t)^2 s^2
//! ```
//!
//! so that `sigma2 + alpha^2 s^2 = t^2`. Conditioning the score regression target on an
//! intermediate `x_s` instead of `x_0` keeps the target unbiased but adds an independent
//! Gaussian innovation with per-coordinate variance
//!
//! ```text
//! kappa(s,t) = (1-t)^2 s^2 / ( t^2 (t^2 (1-s)^2 - s^2 (1-t)^2) ) = alpha^2 s^2 / (sigma2 t^2).
//! ```
//!
//! # Noisy velocity target
//!
//! The velocity parameterisation is linked to the score by
//! `score = -((1-t) v + x_t) / t`, equivalently `v = -(t score + x_t) / (1 - t)`.
//! Substituting the kernel score `-(x_t - alpha x_s) / sigma2` gives the regression target
//!
//! ```text
//! v_noisy(x_s, x_t) = ( t (x_t - alpha x_s) / sigma2 - x_t ) / (1 - t).
//! ```
//!
//! At `s = 0` (`alpha = 1 - t`, `sigma2 = t^2`, `x_s = x_0`, `x_t = (1-t) x_0 + t eps`) the
//! kernel score is `-eps / t` and the target reduces to `eps - x_0`, the flow-matching target.
//! Because the map score -> velocity is affine with slope `-t / (1 - t)`, the extra target
//! variance in velocity space is `kappa(s,t) t^2 / (1-t)^2` per coordinate.
//!
//! All functions are pure; randomness (the `eps` arguments) is always supplied by the caller.

use crate::error::{check_dim, Error, Result};

/// Times closer than this to a singular endpoint are rejected.
pub const ENDPOINT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub alpha: f64,
    pub sigma2: f64,
}

fn check_time(op: &'static str, t: f64) -> Result<()> {
    if !t.is_finite() || !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(op, format!("t={t} is outside [0, 1]")));
    }
    Ok(())
}

fn check_pair(op: &'static str, s: f64, t: f64) -> Result<()> {
    check_time(op, s)?;
    check_time(op, t)?;
    if s >= t {
        return Err(Error::domain(op, format!("need s < t, got s={s}, t={t}")));
    }
    if s > 1.0 - ENDPOINT_EPS {
        return Err(Error::domain(op, format!("s={s} too close to 1")));
    }
    Ok(())
}

fn check_t_positive(op: &'static str, t: f64) -> Result<()> {
    check_time(op, t)?;
    if t < ENDPOINT_EPS {
        return Err(Error::domain(op, format!("t={t} too close to 0")));
    }
    Ok(())
}

fn check_t_below_one(op: &'static str, t: f64) -> Result<()> {
    check_time(op, t)?;
    if t > 1.0 - ENDPOINT_EPS {
        return Err(Error::domain(op, format!("t={t} too close to 1")));
    }
    Ok(())
}

/// Transition mean coefficient `(1 - t) / (1 - s)`.
pub fn alpha(s: f64, t: f64) -> Result<f64> {
    check_pair("alpha", s, t)?;
    Ok((1.0 - t) / (1.0 - s))
}

/// Transition variance `t^2 - alpha^2 s^2`, factored as `(t - s)(t + s - 2ts) / (1 - s)^2` so
/// nothing cancels as `s -> t`.
pub fn sigma2(s: f64, t: f64) -> Result<f64> {
    check_pair("sigma2", s, t)?;
    Ok((t - s) * (t + s - 2.0 * t * s) / ((1.0 - s) * (1.0 - s)))
}

pub fn kernel(s: f64, t: f64) -> Result<KernelParams> {
    Ok(KernelParams {
        alpha: alpha(s, t)?,
        sigma2: sigma2(s, t)?,
    })
}

/// Per-coordinate variance inflation of the noisy-conditioned score target.
pub fn kappa(s: f64, t: f64) -> Result<f64> {
    check_pair("kappa", s, t)?;
    check_t_positive("kappa", t)?;
    let num = (1.0 - t).powi(2) * s * s;
    let den = t * t * (t - s) * (t + s - 2.0 * t * s);
    Ok(num / den)
}

/// The same constant written through the kernel: `alpha^2 s^2 / (sigma2 t^2)`.
pub fn kappa_from_kernel(s: f64, t: f64) -> Result<f64> {
    check_t_positive("kappa_from_kernel", t)?;
    let k = kernel(s, t)?;
    Ok(k.alpha * k.alpha * s * s / (k.sigma2 * t * t))
}

/// `(1 - t) x0 + t eps`.
pub fn forward_sample(x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_time("forward_sample", t)?;
    check_dim("forward_sample", x0.len(), eps.len())?;
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| (1.0 - t) * x + t * e)
        .collect())
}

/// One draw from the kernel `N(alpha xs, sigma2 I)` driven by the standard-normal `eps`.
pub fn transition_sample(xs: &[f64], s: f64, t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_dim("transition_sample", xs.len(), eps.len())?;
    let k = kernel(s, t)?;
    let sd = k.sigma2.sqrt();
    Ok(xs.iter().zip(eps).map(|(x, e)| k.alpha * x + sd * e).collect())
}

fn gaussian_score(xt: &[f64], mean_coef: f64, x: &[f64], var: f64) -> Vec<f64> {
    xt.iter()
        .zip(x)
        .map(|(xt, x)| -(xt - mean_coef * x) / var)
        .collect()
}

/// `grad log p(x_t | x_0) = -(x_t - (1-t) x_0) / t^2`.
pub fn cond_score_clean(xt: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t_positive("cond_score_clean", t)?;
    check_dim("cond_score_clean", xt.len(), x0.len())?;
    Ok(gaussian_score(xt, 1.0 - t, x0, t * t))
}

/// `grad log p(x_t | x_s) = -(x_t - alpha x_s) / sigma2`; identical to the clean score at `s = 0`.
pub fn cond_score_noisy(xt: &[f64], xs: &[f64], s: f64, t: f64) -> Result<Vec<f64>> {
    check_t_positive("cond_score_noisy", t)?;
    check_dim("cond_score_noisy", xt.len(), xs.len())?;
    let k = kernel(s, t)?;
    Ok(gaussian_score(xt, k.alpha, xs, k.sigma2))
}

pub fn velocity_to_score(v: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t_positive("velocity_to_score", t)?;
    check_dim("velocity_to_score", xt.len(), v.len())?;
    Ok(v.iter()
        .zip(xt)
        .map(|(v, x)| -((1.0 - t) * v + x) / t)
        .collect())
}

pub fn score_to_velocity(score: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t_below_one("score_to_velocity", t)?;
    check_dim("score_to_velocity", xt.len(), score.len())?;
    Ok(score
        .iter()
        .zip(xt)
        .map(|(sc, x)| -(t * sc + x) / (1.0 - t))
        .collect())
}

/// Velocity-space regression target obtained from the kernel score conditioned on `x_s`.
pub fn noisy_velocity_target(xs: &[f64], xt: &[f64], s: f64, t: f64) -> Result<Vec<f64>> {
    check_t_below_one("noisy_velocity_target", t)?;
    let score = cond_score_noisy(xt, xs, s, t)?;
    score_to_velocity(&score, xt, t)
}

/// Gaussian posterior of `x_s` given `(x_0, x_t)`: isotropic with the returned scalar variance.
pub fn posterior_xs_params(x0: &[f64], xt: &[f64], s: f64, t: f64) -> Result<(Vec<f64>, f64)> {
    check_t_positive("posterior_xs_params", t)?;
    check_dim("posterior_xs_params", x0.len(), xt.len())?;
    let k = kernel(s, t)?;
    let t2 = t * t;
    let mean = x0
        .iter()
        .zip(xt)
        .map(|(x0, xt)| (k.sigma2 * (1.0 - s) * x0 + k.alpha * s * s * xt) / t2)
        .collect();
    Ok((mean, s * s * k.sigma2 / t2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn alpha_examples() {
        assert_abs_diff_eq!(alpha(0.0, 0.7).unwrap(), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(alpha(0.25, 0.5).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(alpha(0.5, 0.5), Err(Error::Domain { .. })));
        assert!(alpha(0.6, 0.5).is_err());
    }

    #[test]
    fn sigma2_examples() {
        assert_abs_diff_eq!(sigma2(0.0, 0.5).unwrap(), 0.25, epsilon = 1e-15);
        // 0.25 - (2/3)^2 * 0.0625
        let hand = 0.25 - (4.0 / 9.0) * 0.0625;
        assert_abs_diff_eq!(sigma2(0.25, 0.5).unwrap(), hand, epsilon = 1e-15);
        assert_abs_diff_eq!(hand, 0.222_222_222_222_222_2, epsilon = 1e-15);
    }

    #[test]
    fn kernel_identity_on_grid() {
        for i in 0..10 {
            for j in 0..10 {
                let t = 0.05 + 0.95 * (j as f64) / 9.0;
                let s = t * (i as f64) / 10.0;
                let k = kernel(s, t).unwrap();
                assert_abs_diff_eq!(k.sigma2 + k.alpha * k.alpha * s * s, t * t, epsilon = 1e-12);
                assert!(k.sigma2 > 0.0);
            }
        }
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa(0.0, 0.5).unwrap(), 0.0);
        // q = alpha^2 s^2 = (4/9)(1/16) = 1/36; kappa = q / (t^2 (t^2 - q))
        let q = 1.0 / 36.0;
        let hand = q / (0.25 * (0.25 - q));
        assert_abs_diff_eq!(hand, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(kappa(0.25, 0.5).unwrap(), 0.5, epsilon = 1e-14);
        assert!(kappa(0.5, 0.5).is_err());
    }

    #[test]
    fn kappa_increasing_in_s() {
        let ks: Vec<f64> = (0..8)
            .map(|i| kappa(0.1 * i as f64, 0.8).unwrap())
            .collect();
        assert!(ks.windows(2).all(|w| w[1] > w[0]), "{ks:?}");
    }

    #[test]
    fn forward_and_transition_examples() {
        let x0 = [1.0, 0.0];
        let eps = [0.3, -0.7];
        assert_eq!(forward_sample(&x0, 0.0, &eps).unwrap(), x0.to_vec());
        assert_eq!(forward_sample(&x0, 1.0, &eps).unwrap(), eps.to_vec());
        assert_eq!(forward_sample(&x0, 0.5, &[0.0, 2.0]).unwrap(), vec![0.5, 1.0]);
        assert!(matches!(
            forward_sample(&x0, 0.5, &[0.0]),
            Err(Error::DimMismatch { .. })
        ));

        let x = transition_sample(&[2.0], 0.25, 0.5, &[0.0]).unwrap();
        assert_abs_diff_eq!(x[0], 4.0 / 3.0, epsilon = 1e-15);
        // s = 0 reduces to the forward map
        let a = transition_sample(&x0, 0.0, 0.3, &eps).unwrap();
        let b = forward_sample(&x0, 0.3, &eps).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn cond_score_examples() {
        assert_eq!(cond_score_clean(&[0.5], &[1.0], 0.5).unwrap(), vec![0.0]);
        assert_abs_diff_eq!(cond_score_clean(&[1.0], &[0.0], 0.5).unwrap()[0], -4.0);
        assert!(cond_score_clean(&[1.0], &[0.0], 0.0).is_err());

        let s = cond_score_noisy(&[1.0], &[0.9], 0.25, 0.5).unwrap();
        assert_abs_diff_eq!(s[0], -1.8, epsilon = 1e-12);
        let xs = [0.9, -0.2];
        let a = alpha(0.25, 0.5).unwrap();
        let xt = [a * xs[0], a * xs[1]];
        assert_eq!(cond_score_noisy(&xt, &xs, 0.25, 0.5).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn noisy_score_at_s_zero_is_bitwise_clean() {
        let xt = [0.37, -1.25, 2.5];
        let x0 = [0.11, 0.9, -0.4];
        for &t in &[0.03, 0.3, 0.5, 0.97, 1.0] {
            assert_eq!(
                cond_score_noisy(&xt, &x0, 0.0, t).unwrap(),
                cond_score_clean(&xt, &x0, t).unwrap()
            );
        }
    }

    #[test]
    fn velocity_score_examples() {
        assert_abs_diff_eq!(velocity_to_score(&[0.0], &[1.0], 0.5).unwrap()[0], -2.0);
        let (x0, eps, t) = ([0.4, -1.0], [1.3, 0.2], 0.35);
        let xt = forward_sample(&x0, t, &eps).unwrap();
        let v: Vec<f64> = eps.iter().zip(&x0).map(|(e, x)| e - x).collect();
        let sc = velocity_to_score(&v, &xt, t).unwrap();
        for (s, e) in sc.iter().zip(&eps) {
            assert_abs_diff_eq!(*s, -e / t, epsilon = 1e-12);
        }
        assert!(velocity_to_score(&[0.0], &[1.0], 0.0).is_err());
        assert!(score_to_velocity(&[0.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn noisy_target_reduces_to_clean_velocity() {
        let (x0, eps, t) = ([0.4, -1.0], [1.3, 0.2], 0.6);
        let xt = forward_sample(&x0, t, &eps).unwrap();
        let v = noisy_velocity_target(&x0, &xt, 0.0, t).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(v[i], eps[i] - x0[i], epsilon = 1e-12);
        }
        assert!(noisy_velocity_target(&x0, &xt, 0.2, 1.0).is_err());
    }

    #[test]
    fn posterior_at_s_zero_is_point_mass() {
        let (m, v) = posterior_xs_params(&[1.5, -2.0], &[0.1, 0.2], 0.0, 0.4).unwrap();
        assert_eq!(v, 0.0);
        assert_abs_diff_eq!(m[0], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], -2.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn kappa_forms_agree(t in 0.01f64..1.0, frac in 0.0f64..0.99) {
            let s = t * frac;
            let a = kappa(s, t).unwrap();
            let b = kappa_from_kernel(s, t).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }

        #[test]
        fn score_velocity_round_trip(v in -10.0f64..10.0, x in -10.0f64..10.0, t in 0.01f64..0.99) {
            let sc = velocity_to_score(&[v], &[x], t).unwrap();
            let back = score_to_velocity(&sc, &[x], t).unwrap();
            prop_assert!((back[0] - v).abs() <= 1e-12 * (1.0 + v.abs()) / (1.0 - t));
        }
    }
}
