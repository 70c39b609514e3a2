//! Look-ahead optimizer: composition oracle, degenerate configs, loop
//! accounting, copy isolation and determinism.

mod common;

use apdm_core::l2p::{l2p_protect, L2PConfig};
use common::oracles::look_ahead_outer_step;
use common::*;

fn cfg(n_per: usize, n_protect: usize) -> L2PConfig {
    L2PConfig {
        n_per,
        n_protect,
        gamma_per: 0.05,
        gamma_protect: 0.02,
        beta: 1.5,
        ..Default::default()
    }
}

#[test]
fn single_step_matches_look_ahead_composition() {
    for hidden in ARCHS {
        for seed in SEEDS {
            let phi = model(hidden, seed);
            let theta0 = perturbed(&phi, 0.1, seed + 50);
            let data = dataset(seed);
            let c = cfg(1, 1);
            let (out, _) = l2p_protect(&theta0, &phi, &schedule(), &data, &c, &mut rng(seed)).unwrap();
            let want = look_ahead_outer_step(&theta0, &phi, &data, &c, &mut rng(seed));
            for (a, b) in out.params.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10, "{hidden:?}/{seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn outer_step_leaves_theta_j_untouched_by_inner_loop() {
    // With several inner steps the update must still start from θ_j: the
    // oracle applies the summed gradients to the original parameters.
    let phi = model(&[5, 4], 3);
    let data = dataset(3);
    let c = cfg(4, 1);
    let before = phi.params.to_le_bytes();
    let (out, _) = l2p_protect(&phi, &phi, &schedule(), &data, &c, &mut rng(11)).unwrap();
    assert_eq!(phi.params.to_le_bytes(), before);
    let want = look_ahead_outer_step(&phi, &phi, &data, &c, &mut rng(11));
    for (a, b) in out.params.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn zero_outer_steps_is_identity() {
    let phi = model(&[5, 4], 1);
    let theta0 = perturbed(&phi, 0.1, 2);
    let (out, trace) = l2p_protect(&theta0, &phi, &schedule(), &dataset(1), &cfg(20, 0), &mut rng(3)).unwrap();
    assert_eq!(out.params.to_le_bytes(), theta0.params.to_le_bytes());
    assert!(trace.outer.rows.is_empty());
}

#[test]
fn gradient_count_equals_inner_steps() {
    let phi = model(&[3], 4);
    for n_per in [1, 3, 7] {
        let (_, trace) = l2p_protect(&phi, &phi, &schedule(), &dataset(4), &cfg(n_per, 5), &mut rng(5)).unwrap();
        let counts = trace.outer.column("n_grads").unwrap();
        assert_eq!(counts.len(), 5);
        assert!(counts.iter().all(|&n| n == n_per as f64));
        assert_eq!(trace.inner.rows.len(), 5 * n_per);
    }
}

#[test]
fn runs_are_deterministic() {
    let phi = model(&[5, 4], 6);
    let data = dataset(6);
    let run = || l2p_protect(&phi, &phi, &schedule(), &data, &cfg(3, 6), &mut rng(42)).unwrap();
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a.params.to_le_bytes(), b.params.to_le_bytes());
    assert_eq!(ta, tb);
    let (c, _) = l2p_protect(&phi, &phi, &schedule(), &data, &cfg(3, 6), &mut rng(43)).unwrap();
    assert_ne!(a.params.to_le_bytes(), c.params.to_le_bytes());
}

#[test]
fn monitoring_does_not_perturb_the_path() {
    let phi = model(&[5, 4], 7);
    let data = dataset(7);
    let mut other = cfg(2, 4);
    other.monitor_seed = 999;
    let (a, ta) = l2p_protect(&phi, &phi, &schedule(), &data, &cfg(2, 4), &mut rng(1)).unwrap();
    let (b, tb) = l2p_protect(&phi, &phi, &schedule(), &data, &other, &mut rng(1)).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(ta.outer.column("L_protect"), tb.outer.column("L_protect"));
}

#[test]
fn invalid_configs_are_rejected() {
    let phi = model(&[3], 1);
    let bad = L2PConfig { n_per: 0, ..cfg(1, 1) };
    assert!(l2p_protect(&phi, &phi, &schedule(), &dataset(1), &bad, &mut rng(1)).is_err());
    let bad = L2PConfig { gamma_per: -1.0, ..cfg(1, 1) };
    assert!(l2p_protect(&phi, &phi, &schedule(), &dataset(1), &bad, &mut rng(1)).is_err());
}
