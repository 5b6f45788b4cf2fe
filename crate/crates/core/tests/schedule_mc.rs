//! Monte-Carlo checks of the forward kernel and the noisy-target innovation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use awmlab::schedule;
use awmlab::varlab::mean_se;

const N: usize = 1_000_000;

#[test]
fn innovation_has_zero_mean_and_kappa_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x0, xt) = ([0.4], [0.9]);
    for (s, t) in [(0.25, 0.5), (0.5, 0.8), (0.1, 0.3)] {
        let clean = schedule::cond_score_clean(&xt, &x0, t).unwrap()[0];
        let (mean, var) = schedule::posterior_xs_params(&x0, &xt, s, t).unwrap();
        let sd = var.sqrt();
        let innov: Vec<f64> = (0..N)
            .map(|_| {
                let xs = [mean[0] + sd * rng.sample::<f64, _>(StandardNormal)];
                schedule::cond_score_noisy(&xt, &xs, s, t).unwrap()[0] - clean
            })
            .collect();
        let (m, se) = mean_se(&innov);
        let var = innov.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (N as f64 - 1.0);
        let kappa = schedule::kappa(s, t).unwrap();
        assert!(m.abs() < 5.0 * se, "({s},{t}): mean {m} ± {se}");
        assert!((var - kappa).abs() < 0.02 * kappa, "({s},{t}): var {var} vs {kappa}");
    }
}

#[test]
fn composed_transitions_match_the_direct_marginal() {
    // x0 -> x_s -> x_t through the kernel has the law of (1-t) x0 + t eps
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s, t, x0) = (0.3, 0.7, [1.2]);
    let xs: Vec<f64> = (0..N)
        .map(|_| {
            let a = schedule::forward_sample(&x0, s, &[rng.sample(StandardNormal)]).unwrap();
            schedule::transition_sample(&a, s, t, &[rng.sample(StandardNormal)]).unwrap()[0]
        })
        .collect();
    let (m, se) = mean_se(&xs);
    let var = xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (N as f64 - 1.0);
    assert!((m - (1.0 - t) * x0[0]).abs() < 5.0 * se);
    assert!((var - t * t).abs() < 0.01 * t * t, "var {var}");
}
