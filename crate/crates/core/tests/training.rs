//! Short end-to-end training runs through the public API.

use awmlab::analytic::GaussianMixture;
use awmlab::field::OracleField;
use awmlab::net;
use awmlab::pretrain::{pretrain_run, EvalSet, PretrainConfig};
use awmlab::rl::{rl_train, rl_train_with, RlConfig};

fn quick_pretrain(target: &str, seed: u64) -> PretrainConfig {
    PretrainConfig {
        preset: "two-mode-1d".into(),
        steps: 300,
        batch_size: 128,
        lr: 1e-3,
        seed,
        target: target.into(),
        eval_every: 50,
        eval_points: 400,
        w1_samples: 2000,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretraining_approaches_the_oracle() {
    let out = pretrain_run(&quick_pretrain("clean", 1)).unwrap();
    let first = out.records.iter().find(|r| r.oracle_mse.is_finite()).unwrap().oracle_mse;
    assert!(out.final_oracle_mse < 0.5 * first, "{first} -> {}", out.final_oracle_mse);
    assert!(out.final_w1.unwrap() < 0.5);
    // the oracle itself scores zero on the same evaluation set
    let gm = GaussianMixture::preset("two-mode-1d").unwrap();
    let eval = EvalSet::build(&gm, 400, true).unwrap();
    assert!(eval.mse(&OracleField::conditional(gm).unwrap()).unwrap() < 1e-20);
}

#[test]
fn pretraining_is_deterministic_given_seed() {
    let a = pretrain_run(&quick_pretrain("noisy", 4)).unwrap();
    let b = pretrain_run(&quick_pretrain("noisy", 4)).unwrap();
    assert_eq!(a.net.params(), b.net.params());
    let strip = |o: &awmlab::pretrain::PretrainOutcome| -> Vec<(u64, u64, u64)> {
        o.records
            .iter()
            .map(|r| (r.step, r.loss.to_bits(), r.oracle_mse.to_bits()))
            .collect()
    };
    assert_eq!(strip(&a), strip(&b));
    let c = pretrain_run(&quick_pretrain("noisy", 5)).unwrap();
    assert_ne!(a.net.params(), c.net.params());
}

#[test]
fn checkpoint_round_trip_preserves_the_function() {
    let out = pretrain_run(&quick_pretrain("clean", 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    net::save(&out.net, &p).unwrap();
    let back = net::load(&p).unwrap();
    assert_eq!(back.params(), out.net.params());
    assert_eq!(back.arch(), out.net.arch());
}

fn rl_setup() -> (RlConfig, net::VelocityNet) {
    let base = pretrain_run(&PretrainConfig {
        steps: 200,
        conditional: false,
        w1_samples: 0,
        eval_points: 200,
        ..PretrainConfig::default()
    })
    .unwrap()
    .net;
    let cfg = RlConfig {
        iterations: 6,
        group_size: 8,
        groups: 2,
        sampler_steps: 4,
        seed: 3,
        checkpoint_every: 2,
        ..RlConfig::default()
    };
    (cfg, base)
}

#[test]
fn rl_runs_are_reproducible_and_observed() {
    let (cfg, base) = rl_setup();
    for alg in ["awm", "ddpo"] {
        let cfg = RlConfig {
            algorithm: alg.into(),
            ..cfg.clone()
        };
        let mut seen = Vec::new();
        let a = rl_train_with(&cfg, base.clone(), &mut |r, _, ck| {
            seen.push((r.iter, ck));
            Ok(())
        })
        .unwrap();
        let b = rl_train(&cfg, base.clone()).unwrap();
        assert_eq!(a.net.params(), b.net.params(), "{alg}");
        assert_eq!(seen.len(), 6);
        assert_eq!(seen.iter().filter(|s| s.1).count(), 3, "{alg}: {seen:?}");
        let first = &a.records[0];
        assert_eq!(first.mean_kl, 0.0, "{alg}: first update starts at the reference");
        assert!((first.mean_ratio - 1.0).abs() < 1e-12, "{alg}: on-policy ratio");
        assert_ne!(a.net.params(), base.params());
    }
}

#[test]
fn rl_rejects_mismatched_reward_and_condition() {
    let (cfg, base) = rl_setup();
    let bad = RlConfig {
        condition: 99,
        ..cfg.clone()
    };
    assert!(matches!(rl_train(&bad, base.clone()), Err(awmlab::Error::Config(_))));
    let bad = RlConfig {
        reward: awmlab::rl::RewardSpec::ModeIndicator {
            center: vec![0.0],
            radius: 1.0,
        },
        ..cfg
    };
    assert!(rl_train(&bad, base).is_err());
}
