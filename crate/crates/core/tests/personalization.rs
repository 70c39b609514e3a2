//! Personalization losses and trainer.

mod common;

use apdm_core::denoiser::{ConditionalDenoiser, NoisePredictor};
use apdm_core::diffusion::{simple_loss, simple_loss_replay, LossReport, NoiseSchedule, Sample};
use apdm_core::denoiser::ConditioningEmbedding;
use apdm_core::personalization::{per_objective, per_objective_replay, per_simple_loss, personalize, ppl_loss};
use apdm_core::{ApdmError, Result};
use common::*;

/// Predicts the noise exactly: it knows the clean batch and the draws.
struct Oracle<'a> {
    inner: &'a ConditionalDenoiser,
    schedule: &'a NoiseSchedule,
    clean: Vec<Sample>,
}

impl NoisePredictor for Oracle<'_> {
    type Tape = ();
    fn sample_dim(&self) -> usize {
        self.inner.sample_dim()
    }
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn forward(&self, x_t: &[f64], t: usize, _c: &ConditioningEmbedding) -> Result<(Vec<f64>, ())> {
        // invert x_t = √ᾱ x₀ + √(1−ᾱ) ε for whichever clean point fits
        let ab = self.schedule.alpha_bar(t);
        let best = self
            .clean
            .iter()
            .map(|x0| {
                let eps: Vec<f64> = x_t.iter().zip(x0.iter()).map(|(x, c)| (x - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect();
                let norm: f64 = eps.iter().map(|e| e * e).sum();
                (norm, eps)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        Ok((best.1, ()))
    }
    fn backward(&self, _: &(), _: &[f64], _: &mut [f64]) {}
}

#[test]
fn perfect_predictor_has_zero_loss() {
    let s = schedule();
    let base = model(&[3], 1);
    let data = dataset(1);
    // one clean point: inversion is exact
    let single = vec![data.negatives[0].clone()];
    let oracle = Oracle {
        inner: &base,
        schedule: &s,
        clean: single.clone(),
    };
    let r: LossReport = simple_loss(&oracle, &s, &single, &data.c_per, &mut rng(2)).unwrap();
    assert!(r.value.abs() < 1e-20, "{}", r.value);
    let oracle = Oracle {
        inner: &base,
        schedule: &s,
        clean: single.clone(),
    };
    let mut sub = data.clone();
    sub.negatives = single.clone();
    sub.positives = vec![sub.positives[0].clone()];
    sub.pairing = vec![0];
    sub.priors = single;
    let per = per_objective(&oracle, &s, &sub, &mut rng(3)).unwrap();
    assert!(per.value.abs() < 1e-20);
}

#[test]
fn components_equal_direct_simple_loss() {
    let m = model(&[5, 4], 2);
    let data = dataset(2);
    let s = schedule();
    let per = per_simple_loss(&m, &s, &data, &mut rng(9)).unwrap();
    let direct = simple_loss_replay(&m, &s, &data.negatives, &data.c_per, per.draws.clone()).unwrap();
    assert_eq!(per, direct);
    let ppl = ppl_loss(&m, &s, &data, &mut rng(9)).unwrap();
    let direct = simple_loss_replay(&m, &s, &data.priors, &data.c_pr, ppl.draws.clone()).unwrap();
    assert_eq!(ppl, direct);
}

#[test]
fn objective_is_exact_sum_of_components() {
    let m = model(&[5, 4], 3);
    let data = dataset(3);
    let s = schedule();
    let obj = per_objective(&m, &s, &data, &mut rng(4)).unwrap();
    assert_eq!(obj.value, obj.per.value + obj.ppl.value);
    for k in 0..obj.grad.len() {
        assert_eq!(obj.grad[k], obj.per.grad[k] + obj.ppl.grad[k]);
    }
    let replay = per_objective_replay(&m, &s, &data, obj.per.draws.clone(), obj.ppl.draws.clone()).unwrap();
    assert_eq!(replay.value, obj.value);
    assert_eq!(replay.grad, obj.grad);
}

#[test]
fn empty_sets_are_usage_errors() {
    let m = model(&[3], 1);
    let mut data = dataset(1);
    data.negatives.clear();
    assert!(matches!(per_simple_loss(&m, &schedule(), &data, &mut rng(1)), Err(ApdmError::Usage(_))));
    let mut data = dataset(1);
    data.priors.clear();
    assert!(matches!(ppl_loss(&m, &schedule(), &data, &mut rng(1)), Err(ApdmError::Usage(_))));
}

#[test]
fn zero_steps_returns_input() {
    let m = model(&[5, 4], 5);
    let (out, trace) = personalize(&m, &schedule(), &dataset(5), 0, 1e-3, &mut rng(1)).unwrap();
    assert_eq!(out.params.to_le_bytes(), m.params.to_le_bytes());
    assert!(trace.rows.is_empty());
}

#[test]
fn one_step_matches_hand_applied_update() {
    let m = model(&[5, 4], 6);
    let data = dataset(6);
    let lr = 0.01;
    let (out, trace) = personalize(&m, &schedule(), &data, 1, lr, &mut rng(8)).unwrap();
    let obj = per_objective(&m, &schedule(), &data, &mut rng(8)).unwrap();
    for ((a, p), g) in out.params.iter().zip(m.params.iter()).zip(&obj.grad) {
        assert_eq!(*a, p - lr * g);
    }
    assert_eq!(trace.rows[0], vec![0.0, obj.per.value, obj.ppl.value, obj.value]);
}

#[test]
fn personalize_is_deterministic_and_leaves_input() {
    let m = model(&[5, 4], 7);
    let before = m.params.to_le_bytes();
    let data = dataset(7);
    let (a, ta) = personalize(&m, &schedule(), &data, 15, 1e-2, &mut rng(3)).unwrap();
    let (b, tb) = personalize(&m, &schedule(), &data, 15, 1e-2, &mut rng(3)).unwrap();
    assert_eq!(a.params.to_le_bytes(), b.params.to_le_bytes());
    assert_eq!(ta, tb);
    assert_eq!(m.params.to_le_bytes(), before);
    assert!(personalize(&m, &schedule(), &data, 1, 0.0, &mut rng(3)).is_err());
}
