//! Protection trainers. [`l2p_protect`] is the dual-path look-ahead
//! optimizer; [`dpo_protect`] and [`naive_protect`] are the single-path
//! baselines it is compared against.
//!
//! Random draws for [`l2p_protect`] come from the master stream in this
//! order, for every outer step `j` and inner step `i`:
//!
//! 1. personalization objective at `θ′_i`: subject draws, then prior draws;
//! 2. protection objective at `θ′_{i+1}`: pair draws, then prior draws.
//!
//! Trace-only quantities (the protection loss at `θ_j`) use a separate
//! monitor stream seeded from [`L2PConfig::monitor_seed`], so monitoring
//! never perturbs the optimization path.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptDataset;
use crate::denoiser::ConditionalDenoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{ApdmError, Result};
use crate::personalization::{per_objective, per_objective_replay};
use crate::protection::{adv_from_parts, protect_loss, GradientDiagnostics, DIAGNOSTIC_COLUMNS};
use crate::trace::ExperimentTrace;
use crate::LabRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2PConfig {
    /// Inner personalization steps per outer step.
    pub n_per: usize,
    /// Outer protection steps.
    pub n_protect: usize,
    /// Inner learning rate. Billion-parameter backbones use 5e-6; the toy
    /// network needs a larger step.
    pub gamma_per: f64,
    /// Outer learning rate. The inner gradients are summed, not averaged,
    /// so the effective step grows with `n_per`.
    pub gamma_protect: f64,
    pub beta: f64,
    /// Emit a checkpoint every this many outer steps (0 disables).
    pub checkpoint_every: usize,
    pub monitor_seed: u64,
}

impl Default for L2PConfig {
    fn default() -> Self {
        L2PConfig {
            n_per: 20,
            n_protect: 800,
            gamma_per: 1e-3,
            gamma_protect: 1e-3,
            beta: 1.0,
            checkpoint_every: 0,
            monitor_seed: 0x6c32_70,
        }
    }
}

impl L2PConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per == 0 {
            return Err(ApdmError::config("l2p.n_per must be >= 1"));
        }
        if !(self.gamma_per > 0.0) {
            return Err(ApdmError::config("l2p.gamma_per must be > 0"));
        }
        if !(self.gamma_protect > 0.0) {
            return Err(ApdmError::config("l2p.gamma_protect must be > 0"));
        }
        if !(self.beta > 0.0) {
            return Err(ApdmError::config("l2p.beta must be > 0"));
        }
        Ok(())
    }
}

/// Elementwise sum of the gradient list, in list order.
pub fn accumulate(grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = grads.first().ok_or_else(|| ApdmError::usage("cannot accumulate an empty gradient list"))?;
    let mut sum = first.clone();
    for (k, g) in grads.iter().enumerate().skip(1) {
        if g.len() != sum.len() {
            return Err(ApdmError::usage(format!(
                "gradient {k} has length {}, expected {}",
                g.len(),
                sum.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    Ok(sum)
}

pub const L2P_COLUMNS: [&str; 5] = ["j", "L_protect", "mean_inner_L_per", "cosine", "n_grads"];
pub const L2P_INNER_COLUMNS: [&str; 3] = ["j", "i", "L_per"];

/// Outer-step trace plus the inner personalization loss curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2PTrace {
    pub outer: ExperimentTrace,
    pub inner: ExperimentTrace,
    /// Outer steps whose first inner update raised `L_per` on the draws
    /// it was computed from.
    pub inner_rises: usize,
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

/// Learning to Protect. Each outer step copies `θ_j`, runs `n_per`
/// personalization steps on the copy, collects the protection gradient
/// after every inner step, and applies the sum of those gradients to `θ_j`.
/// No gradient flows through the inner updates.
pub fn l2p_protect<R: Rng + ?Sized>(
    theta0: &ConditionalDenoiser,
    phi: &ConditionalDenoiser,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    cfg: &L2PConfig,
    rng: &mut R,
) -> Result<(ConditionalDenoiser, L2PTrace)> {
    l2p_protect_with_hook(theta0, phi, schedule, dataset, cfg, rng, |_, _| Ok(()))
}

/// [`l2p_protect`] calling `on_checkpoint(j, θ_j)` every
/// `cfg.checkpoint_every` completed outer steps.
pub fn l2p_protect_with_hook<R, F>(
    theta0: &ConditionalDenoiser,
    phi: &ConditionalDenoiser,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    cfg: &L2PConfig,
    rng: &mut R,
    mut on_checkpoint: F,
) -> Result<(ConditionalDenoiser, L2PTrace)>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &ConditionalDenoiser) -> Result<()>,
{
    cfg.validate()?;
    dataset.validate()?;
    if !theta0.params.is_finite() {
        return Err(ApdmError::numeric("initial parameters are not finite"));
    }
    let mut monitor = LabRng::seed_from_u64(cfg.monitor_seed);
    let mut theta = theta0.clone();
    let mut trace = L2PTrace {
        outer: ExperimentTrace::new("l2p", &L2P_COLUMNS),
        inner: ExperimentTrace::new("l2p_inner", &L2P_INNER_COLUMNS),
        inner_rises: 0,
    };
    for j in 0..cfg.n_protect {
        let monitored = protect_loss(&theta, phi, schedule, dataset, cfg.beta, &mut monitor)?;
        let mut lookahead = theta.clone();
        let mut g: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_per);
        let mut inner_losses = Vec::with_capacity(cfg.n_per);
        let mut cosine = f64::NAN;
        for i in 0..cfg.n_per {
            let per = per_objective(&lookahead, schedule, dataset, rng)?;
            if !per.value.is_finite() || !finite(&per.grad) {
                return Err(ApdmError::numeric(format!("personalization path not finite at (j={j}, i={i})")));
            }
            if i == 0 {
                let diag = GradientDiagnostics::from_gradients(&per.per.grad, &per.ppl.grad, cfg.gamma_protect)?;
                cosine = diag.cosine;
            }
            inner_losses.push(per.value);
            trace.inner.push(vec![j as f64, i as f64, per.value]);
            lookahead.params.descend(cfg.gamma_per, &per.grad);
            if i == 0 {
                // first inner step judged on its own draws
                let after = per_objective_replay(&lookahead, schedule, dataset, per.per.draws.clone(), per.ppl.draws.clone())?;
                if after.value > per.value {
                    trace.inner_rises += 1;
                }
            }
            let prot = protect_loss(&lookahead, phi, schedule, dataset, cfg.beta, rng)?;
            if !prot.value.is_finite() || !finite(&prot.grad) {
                return Err(ApdmError::numeric(format!("protection gradient not finite at (j={j}, i={i})")));
            }
            g.push(prot.grad);
        }
        let grad = accumulate(&g)?;
        theta.params.descend(cfg.gamma_protect, &grad);
        if !theta.params.is_finite() {
            return Err(ApdmError::numeric(format!("protected parameters not finite after j={j}")));
        }
        let mean_inner = inner_losses.iter().sum::<f64>() / inner_losses.len() as f64;
        trace.outer.push(vec![j as f64, monitored.value, mean_inner, cosine, g.len() as f64]);
        if cfg.checkpoint_every > 0 && (j + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(j + 1, &theta)?;
        }
    }
    Ok((theta, trace))
}

pub const DPO_COLUMNS: [&str; 4] = ["step", "L_protect", "L_dpo", "L_ppl"];

/// Plain descent on the protection objective, without the look-ahead path.
pub fn dpo_protect<R: Rng + ?Sized>(
    theta0: &ConditionalDenoiser,
    phi: &ConditionalDenoiser,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    steps: usize,
    lr: f64,
    beta: f64,
    rng: &mut R,
) -> Result<(ConditionalDenoiser, ExperimentTrace)> {
    if !(lr > 0.0) {
        return Err(ApdmError::config("protect lr must be > 0"));
    }
    let mut theta = theta0.clone();
    let mut trace = ExperimentTrace::new("dpo", &DPO_COLUMNS);
    for step in 0..steps {
        let prot = protect_loss(&theta, phi, schedule, dataset, beta, rng)?;
        if !prot.value.is_finite() || !finite(&prot.grad) {
            return Err(ApdmError::numeric(format!("protection loss not finite at step {step}")));
        }
        trace.push(vec![step as f64, prot.value, prot.dpo.value, prot.ppl.value]);
        theta.params.descend(lr, &prot.grad);
    }
    Ok((theta, trace))
}

pub const NAIVE_COLUMNS: [&str; 4] = ["step", "L_adv", "L_per_simple", "L_ppl"];

/// Descent on `−L^per_simple + λ·L_ppl`. Returns the per-step loss trace
/// and a diagnostics trace (one row per step) computed from the same
/// component gradients the update uses, with `eta = lr`.
pub fn naive_protect<R: Rng + ?Sized>(
    theta0: &ConditionalDenoiser,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    steps: usize,
    lr: f64,
    lambda: f64,
    rng: &mut R,
    mut on_step: impl FnMut(usize, &ConditionalDenoiser) -> Result<()>,
) -> Result<(ConditionalDenoiser, ExperimentTrace, ExperimentTrace)> {
    if !(lr > 0.0) {
        return Err(ApdmError::config("protect lr must be > 0"));
    }
    if !(lambda > 0.0) {
        return Err(ApdmError::config(format!("adv lambda = {lambda} must be > 0")));
    }
    let mut theta = theta0.clone();
    let mut losses = ExperimentTrace::new("naive", &NAIVE_COLUMNS);
    let mut diagnostics = ExperimentTrace::new("diagnostics", &DIAGNOSTIC_COLUMNS);
    for step in 0..steps {
        on_step(step, &theta)?;
        let per = crate::personalization::per_simple_loss(&theta, schedule, dataset, rng)?;
        let ppl = crate::personalization::ppl_loss(&theta, schedule, dataset, rng)?;
        let diag = GradientDiagnostics::from_gradients(&per.grad, &ppl.grad, lr)?;
        let adv = adv_from_parts(per, ppl, lambda);
        if !adv.value.is_finite() || !finite(&adv.grad) {
            return Err(ApdmError::numeric(format!("adversarial loss not finite at step {step}")));
        }
        losses.push(vec![step as f64, adv.value, adv.per.value, adv.ppl.value]);
        diagnostics.push(diag.row(step));
        theta.params.descend(lr, &adv.grad);
    }
    on_step(steps, &theta)?;
    Ok((theta, losses, diagnostics))
}
