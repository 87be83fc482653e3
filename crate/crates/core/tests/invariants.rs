//! Invariants of the integrated flow, audited step by step.

use plflow::data::{self, DataKind};
use plflow::flow::{self, FlowConfig, Integrator};
use plflow::init::{self, InitMode};
use plflow::model::{DataSet, NetworkState};
use plflow::oracle;

fn orthonormal_start(n: usize, d: usize, seed: u64) -> (DataSet, NetworkState) {
    let data = data::generate(&DataKind::Orthonormal, d, n, seed).unwrap();
    let p = init::recommended_p(n, 0.05).unwrap();
    let net = init::init_standard(p, d, InitMode::Asymmetric, seed).unwrap();
    (data, net)
}

/// Steps `net` `steps` times, calling `check(step_index, state)` after each.
fn walk(net: &NetworkState, data: &DataSet, eta: f64, steps: usize, mut check: impl FnMut(usize, &NetworkState)) {
    let mut s = net.clone();
    for k in 1..=steps {
        s = flow::step(&s, data, eta, Integrator::Euler).unwrap();
        check(k, &s);
    }
}

#[test]
fn inactive_gates_stay_shut_on_orthogonal_data() {
    for seed in 0..3 {
        let (data, net) = orthonormal_start(16, 32, seed);
        let z0 = net.preactivations(&data).unwrap();
        walk(&net, &data, 0.1, 600, |k, s| {
            let z = s.preactivations(&data).unwrap();
            for ((ji, &before), &now) in z0.indexed_iter().zip(z.iter()) {
                if before < -1e-9 {
                    assert!(now < 0.0, "seed {seed}, gate {ji:?} opened at step {k}");
                }
            }
        });
    }
}

#[test]
fn correctly_activated_neurons_stay_active() {
    for seed in 0..3 {
        let (data, net) = orthonormal_start(16, 32, seed);
        let z0 = net.preactivations(&data).unwrap();
        let y = data.outputs().clone();
        walk(&net, &data, 0.01, 6000, |k, s| {
            let z = s.preactivations(&data).unwrap();
            for ((j, i), &before) in z0.indexed_iter() {
                if before > 0.0 && net.a[j] * y[i] > 0.0 {
                    assert!(z[(j, i)] > 0.0, "seed {seed}, correct gate ({j}, {i}) shut at step {k}");
                }
            }
        });
    }
}

/// The extinction bound needs the dimension large against `n` and `p`; at
/// `d = 2n` residuals move before the wrongly signed gates close and some
/// never do.
#[test]
fn wrongly_signed_gates_shut_by_the_extinction_time() {
    for seed in 0..3 {
        let (data, net) = orthonormal_start(8, 1024, seed);
        let t_ext = oracle::extinction_time(&net, &data).unwrap();
        let eta = 0.05;
        let steps = (t_ext / eta).ceil() as usize;
        assert!(steps < 100_000, "extinction time {t_ext} too long for a test");
        let z0 = net.preactivations(&data).unwrap();
        let y = data.outputs().clone();
        let wrong: Vec<(usize, usize)> = z0
            .indexed_iter()
            .filter(|&((j, i), &z)| z > 0.0 && net.a[j] * y[i] < 0.0)
            .map(|(ji, _)| ji)
            .collect();
        assert!(!wrong.is_empty(), "seed {seed} has no wrongly signed active gate");
        let mut last = net.clone();
        walk(&net, &data, eta, steps, |_, s| last = s.clone());
        let z = last.preactivations(&data).unwrap();
        for &(j, i) in &wrong {
            assert!(z[(j, i)] <= 0.0, "seed {seed}: gate ({j}, {i}) still open at t = {t_ext}");
        }
    }
}

#[test]
fn balanced_starts_keep_their_signs() {
    for seed in 0..4 {
        let data = data::generate(&DataKind::WhitenedSphere, 20, 40, seed).unwrap();
        let net = init::init_standard(12, 20, InitMode::Asymmetric, seed).unwrap();
        for integ in [Integrator::Euler, Integrator::Rk4] {
            let cfg = FlowConfig::new(0.1, 60.0).integrator(integ);
            let rec = flow::integrate(&net, &data, &cfg).unwrap();
            assert_eq!(rec.audit.sign_changes, 0, "seed {seed}, {}", integ.label());
            for (a0, a1) in net.a.iter().zip(&rec.last.a) {
                assert_eq!(a0.signum(), a1.signum());
            }
        }
    }
}

#[test]
fn loss_increases_vanish_as_the_step_shrinks() {
    // Unit steps overshoot on this many points per dimension; steps of 0.1
    // and below follow the flow.
    let data = data::generate(&DataKind::WhitenedSphere, 30, 300, 2).unwrap();
    let p = init::recommended_p(300, 0.05).unwrap();
    let net = init::init_standard(p, 30, InitMode::Asymmetric, 2).unwrap();
    let horizon = flow::default_horizon(300, p);
    let count = |eta: f64| {
        let rec = flow::integrate(&net, &data, &FlowConfig::new(eta, horizon)).unwrap();
        (rec.audit.loss_increases, rec.audit.max_loss_increase)
    };
    let (coarse, _) = count(1.0);
    assert!(coarse > 0, "unit steps did not overshoot");
    for eta in [0.1, 0.01] {
        let (fine, worst) = count(eta);
        assert_eq!(fine, 0, "step {eta}: {fine} increases, worst {worst:e}");
    }
}

#[test]
fn frozen_pattern_rk4_conserves_balance_better_than_staged() {
    let data = data::generate(&DataKind::WhitenedSphere, 10, 30, 4).unwrap();
    let net = init::init_standard(6, 10, InitMode::Asymmetric, 4).unwrap();
    let drift = |integ: Integrator| {
        let cfg = FlowConfig::new(0.05, 20.0).integrator(integ);
        let rec = flow::integrate(&net, &data, &cfg).unwrap();
        assert!(rec.audit.gate_flips > 0, "no gate switched; the comparison is vacuous");
        rec.conservation_drift
    };
    let frozen = drift(Integrator::Rk4);
    let staged = drift(Integrator::Rk4Staged);
    let euler = drift(Integrator::Euler);
    assert!(frozen < staged, "frozen {frozen:e} vs staged {staged:e}");
    assert!(frozen < 1e-3 * euler, "frozen {frozen:e} vs euler {euler:e}");
    assert_eq!(Integrator::parse("rk4-staged").unwrap(), Integrator::Rk4Staged);
}

#[test]
fn rk4_drift_is_fourth_order() {
    let data = data::generate(&DataKind::Orthonormal, 12, 6, 8).unwrap();
    let net = init::init_standard(5, 12, InitMode::Asymmetric, 8).unwrap();
    let drift = |eta: f64| {
        let cfg = FlowConfig::new(eta, 5.0).integrator(Integrator::Rk4);
        flow::integrate(&net, &data, &cfg).unwrap().conservation_drift
    };
    let ratio = drift(0.1) / drift(0.05);
    assert!((10.0..=22.0).contains(&ratio), "halving ratio {ratio}");
}

#[test]
fn integration_is_deterministic() {
    let (data, net) = orthonormal_start(10, 20, 5);
    let cfg = FlowConfig::new(0.1, 30.0).with_pl().with_detail();
    let a = flow::integrate(&net, &data, &cfg).unwrap();
    let b = flow::integrate(&net, &data, &cfg).unwrap();
    assert_eq!(a, b);
}
