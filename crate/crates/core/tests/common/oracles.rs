//! Independent recomputations used as test oracles.

use apdm_core::concepts::ConceptDataset;
use apdm_core::denoiser::{Arch, ConditionalDenoiser, ConditioningEmbedding, EmbeddingTag, ParamVector, TimeEmbedding};
use apdm_core::diffusion::{draw_noise, simple_loss, simple_loss_replay, Draw, Sample};
use apdm_core::gradcheck::{grad_check, GradCheckReport};
use apdm_core::l2p::L2PConfig;
use apdm_core::personalization::{per_objective, per_objective_replay, per_simple_loss, ppl_loss};
use apdm_core::protection::{adv_loss, dpo_loss, protect_loss, DpoReport, PairBatch};
use apdm_core::{LabRng, Result};

use super::*;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub type Loss = Box<dyn Fn(&ConditionalDenoiser, &ConditionalDenoiser, u64) -> Result<(f64, Vec<f64>)>>;

/// Every differentiable loss of the library, with a fixed draw stream per
/// seed so repeated evaluations replay the same noise.
pub fn all_losses() -> Vec<(&'static str, Loss)> {
    let mut out: Vec<(&'static str, Loss)> = vec![
        (
            "simple_loss",
            Box::new(|m, _, seed| {
                let data = dataset(seed);
                let r = simple_loss(m, &schedule(), &data.priors, &data.c_pr, &mut rng(seed))?;
                Ok((r.value, r.grad))
            }),
        ),
        (
            "per_simple_loss",
            Box::new(|m, _, seed| {
                let r = per_simple_loss(m, &schedule(), &dataset(seed), &mut rng(seed))?;
                Ok((r.value, r.grad))
            }),
        ),
        (
            "ppl_loss",
            Box::new(|m, _, seed| {
                let r = ppl_loss(m, &schedule(), &dataset(seed), &mut rng(seed))?;
                Ok((r.value, r.grad))
            }),
        ),
        (
            "per_objective",
            Box::new(|m, _, seed| {
                let r = per_objective(m, &schedule(), &dataset(seed), &mut rng(seed))?;
                Ok((r.value, r.grad))
            }),
        ),
        (
            "dpo_loss",
            Box::new(|m, phi, seed| {
                let data = dataset(seed);
                let batch = PairBatch::draw(data.pairs(), &schedule(), &mut rng(seed))?;
                let r = dpo_loss(m, phi, &schedule(), &batch, &data.c_per, 1.0)?;
                Ok((r.value, r.grad))
            }),
        ),
        (
            "dpo_loss beta=10",
            Box::new(|m, phi, seed| {
                let data = dataset(seed);
                let batch = PairBatch::draw(data.pairs(), &schedule(), &mut rng(seed))?;
                let r = dpo_loss(m, phi, &schedule(), &batch, &data.c_per, 10.0)?;
                Ok((r.value, r.grad))
            }),
        ),
        (
            "protect_loss",
            Box::new(|m, phi, seed| {
                let r = protect_loss(m, phi, &schedule(), &dataset(seed), 1.0, &mut rng(seed))?;
                Ok((r.value, r.grad))
            }),
        ),
    ];
    for (name, lambda) in [("adv_loss lambda=0.1", 0.1), ("adv_loss lambda=1", 1.0), ("adv_loss lambda=10", 10.0)] {
        out.push((
            name,
            Box::new(move |m, _, seed| {
                let r = adv_loss(m, &schedule(), &dataset(seed), lambda, &mut rng(seed))?;
                Ok((r.value, r.grad))
            }),
        ));
    }
    out
}

/// Central-difference check of `loss` on every architecture and seed;
/// returns the worst report.
pub fn check_loss(loss: &Loss) -> GradCheckReport {
    let mut worst: Option<GradCheckReport> = None;
    for hidden in ARCHS {
        for seed in SEEDS {
            let base = model(hidden, seed);
            // a reference model distinct from the checked parameters
            let phi = perturbed(&base, 0.3, seed + 100);
            let eval = |p: &[f64]| loss(&base.with_params(ParamVector(p.to_vec())), &phi, seed);
            let report = grad_check(eval, &base.params, FD_STEP, FD_TOL).unwrap();
            if worst.as_ref().map_or(true, |w| report.max_rel_err > w.max_rel_err) {
                worst = Some(report);
            }
        }
    }
    worst.unwrap()
}

/// Triple-loop kernel sums written out independently of the library.
pub fn brute_mmd2(a: &[Sample], b: &[Sample], h: f64) -> f64 {
    let k = |x: &Sample, y: &Sample| {
        let mut d2 = 0.0;
        for i in 0..x.len() {
            d2 += (x[i] - y[i]) * (x[i] - y[i]);
        }
        (-d2 / (2.0 * h * h)).exp()
    };
    let mut kaa = 0.0;
    for x in a {
        for y in a {
            kaa += k(x, y);
        }
    }
    let mut kbb = 0.0;
    for x in b {
        for y in b {
            kbb += k(x, y);
        }
    }
    let mut kab = 0.0;
    for x in a {
        for y in b {
            kab += k(x, y);
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    kaa / (na * na) + kbb / (nb * nb) - 2.0 * kab / (na * nb)
}

/// Scalar model: one sample coordinate, one conditioning coordinate, one
/// hidden unit. Parameters `[w_x, w_sin, w_cos, w_c, b1, v, b2]`.
pub fn unit_arch() -> Arch {
    Arch {
        sample_dim: 1,
        cond_dim: 1,
        hidden: vec![1],
        time: TimeEmbedding {
            steps: 50,
            frequency: std::f64::consts::PI,
        },
    }
}

fn unit_predict(p: &[f64; 7], t: usize, x: f64, c: f64) -> (f64, [f64; 7]) {
    let phase = std::f64::consts::PI * t as f64 / 50.0;
    let f = [x, phase.sin(), phase.cos(), c];
    let z = p[0] * f[0] + p[1] * f[1] + p[2] * f[2] + p[3] * f[3] + p[4];
    let h = z.tanh();
    let out = p[5] * h + p[6];
    let dz = p[5] * (1.0 - h * h);
    (out, [dz * f[0], dz * f[1], dz * f[2], dz * f[3], dz, h, 1.0])
}

fn alpha_bar(t: usize) -> f64 {
    (1..=t).map(|s| 1.0 - (1e-3 + (0.2 - 1e-3) * (s - 1) as f64 / 49.0)).product()
}

pub struct HandDpo {
    pub value: f64,
    pub margin: f64,
    pub grad: [f64; 7],
    pub report: DpoReport,
}

/// One pair through the scalar model, evaluated by hand (noising,
/// forward pass, sigmoid and chain rule) next to the library result.
pub fn hand_dpo_single_pair() -> HandDpo {
    let theta_p = [0.3, -0.7, 0.2, 0.5, 0.1, 1.3, -0.2];
    let phi_p = [-0.4, 0.6, 0.9, -0.3, 0.25, 0.8, 0.05];
    let theta = ConditionalDenoiser::from_params(unit_arch(), ParamVector(theta_p.to_vec())).unwrap();
    let phi = ConditionalDenoiser::from_params(unit_arch(), ParamVector(phi_p.to_vec())).unwrap();
    let c = ConditioningEmbedding {
        vector: vec![0.8],
        tag: EmbeddingTag::Identifier,
    };
    let (x_pos, x_neg, t, eps, beta) = (0.6, -1.1, 17usize, 0.45, 2.5);
    let batch = PairBatch {
        pairs: vec![(Sample(vec![x_pos]), Sample(vec![x_neg]))],
        shared_draws: vec![Draw { t, eps: Sample(vec![eps]) }],
    };
    let report = dpo_loss(&theta, &phi, &schedule(), &batch, &c, beta).unwrap();

    let ab = alpha_bar(t);
    let noised = |x0: f64| ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
    let (tp, dtp) = unit_predict(&theta_p, t, noised(x_pos), 0.8);
    let (tn, dtn) = unit_predict(&theta_p, t, noised(x_neg), 0.8);
    let (pp, _) = unit_predict(&phi_p, t, noised(x_pos), 0.8);
    let (pn, _) = unit_predict(&phi_p, t, noised(x_neg), 0.8);
    let r_pos = (tp - eps).powi(2) - (pp - eps).powi(2);
    let r_neg = (tn - eps).powi(2) - (pn - eps).powi(2);
    let margin = r_pos - r_neg;
    let value = (1.0 + (beta * margin).exp()).ln();
    let s = 1.0 / (1.0 + (-beta * margin).exp());
    let mut grad = [0.0; 7];
    for k in 0..7 {
        grad[k] = beta * s * (2.0 * (tp - eps) * dtp[k] - 2.0 * (tn - eps) * dtn[k]);
    }
    HandDpo {
        value,
        margin,
        grad,
        report,
    }
}

/// One outer protection step recomputed from scratch on replayed draws.
pub fn look_ahead_outer_step(
    theta0: &ConditionalDenoiser,
    phi: &ConditionalDenoiser,
    data: &ConceptDataset,
    cfg: &L2PConfig,
    r: &mut LabRng,
) -> Vec<f64> {
    let s = schedule();
    let mut lookahead = theta0.params.0.clone();
    let mut total = vec![0.0; lookahead.len()];
    for _ in 0..cfg.n_per {
        let m = theta0.with_params(ParamVector(lookahead.clone()));
        let per_draws = draw_noise(&s, data.negatives.len(), 2, r);
        let ppl_draws = draw_noise(&s, data.priors.len(), 2, r);
        let per = per_objective_replay(&m, &s, data, per_draws, ppl_draws).unwrap();
        for (p, g) in lookahead.iter_mut().zip(&per.grad) {
            *p -= cfg.gamma_per * g;
        }
        let m = theta0.with_params(ParamVector(lookahead.clone()));
        let batch = PairBatch {
            pairs: data.pairs(),
            shared_draws: draw_noise(&s, data.negatives.len(), 2, r),
        };
        let dpo = dpo_loss(&m, phi, &s, &batch, &data.c_per, cfg.beta).unwrap();
        let ppl_draws = draw_noise(&s, data.priors.len(), 2, r);
        let ppl = simple_loss_replay(&m, &s, &data.priors, &data.c_pr, ppl_draws).unwrap();
        for k in 0..total.len() {
            total[k] += dpo.grad[k] + ppl.grad[k];
        }
    }
    theta0.params.iter().zip(&total).map(|(p, g)| p - cfg.gamma_protect * g).collect()
}
