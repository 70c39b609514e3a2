//! Identifier-conditioned fine-tuning with prior preservation. The same
//! trainer plays the attacker against a safeguarded model.

use rand::Rng;

use crate::concepts::ConceptDataset;
use crate::denoiser::{ConditionalDenoiser, NoisePredictor};
use crate::diffusion::{simple_loss, simple_loss_replay, Draw, LossReport, NoiseSchedule};
use crate::error::{ApdmError, Result};
use crate::trace::ExperimentTrace;

/// Denoising loss on the subject samples under `c_per`.
pub fn per_simple_loss<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    rng: &mut R,
) -> Result<LossReport> {
    if dataset.negatives.is_empty() {
        return Err(ApdmError::usage("dataset has no subject samples"));
    }
    simple_loss(model, schedule, &dataset.negatives, &dataset.c_per, rng)
}

/// Prior-preservation loss on the generated class samples under `c_pr`.
pub fn ppl_loss<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    rng: &mut R,
) -> Result<LossReport> {
    if dataset.priors.is_empty() {
        return Err(ApdmError::usage("dataset has no prior-preservation samples"));
    }
    simple_loss(model, schedule, &dataset.priors, &dataset.c_pr, rng)
}

/// Both components of the personalization objective and their sum.
#[derive(Clone, Debug)]
pub struct PerObjective {
    pub value: f64,
    pub grad: Vec<f64>,
    pub per: LossReport,
    pub ppl: LossReport,
}

/// `L_per = L^per_simple + L_ppl`; subject draws precede prior draws.
pub fn per_objective<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    rng: &mut R,
) -> Result<PerObjective> {
    let per = per_simple_loss(model, schedule, dataset, rng)?;
    let ppl = ppl_loss(model, schedule, dataset, rng)?;
    Ok(combine(per, ppl))
}

/// [`per_objective`] on recorded draws.
pub fn per_objective_replay<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    per_draws: Vec<Draw>,
    ppl_draws: Vec<Draw>,
) -> Result<PerObjective> {
    let per = simple_loss_replay(model, schedule, &dataset.negatives, &dataset.c_per, per_draws)?;
    let ppl = simple_loss_replay(model, schedule, &dataset.priors, &dataset.c_pr, ppl_draws)?;
    Ok(combine(per, ppl))
}

fn combine(per: LossReport, ppl: LossReport) -> PerObjective {
    let grad = per.grad.iter().zip(&ppl.grad).map(|(a, b)| a + b).collect();
    PerObjective {
        value: per.value + ppl.value,
        grad,
        per,
        ppl,
    }
}

pub const PERSONALIZE_COLUMNS: [&str; 4] = ["step", "L_per_simple", "L_ppl", "L_per"];

/// Full-batch gradient descent on [`per_objective`] for `steps` steps.
/// Losses are recorded before each update.
pub fn personalize<R: Rng + ?Sized>(
    model: &ConditionalDenoiser,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    steps: usize,
    lr: f64,
    rng: &mut R,
) -> Result<(ConditionalDenoiser, ExperimentTrace)> {
    if !(lr > 0.0) {
        return Err(ApdmError::config(format!("personalize lr = {lr} must be > 0")));
    }
    let mut trained = model.clone();
    let mut trace = ExperimentTrace::new("personalize", &PERSONALIZE_COLUMNS);
    for step in 0..steps {
        let obj = per_objective(&trained, schedule, dataset, rng)?;
        if !obj.value.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
            return Err(ApdmError::numeric(format!("personalization loss not finite at step {step}")));
        }
        trace.push(vec![step as f64, obj.per.value, obj.ppl.value, obj.value]);
        trained.params.descend(lr, &obj.grad);
    }
    Ok((trained, trace))
}
