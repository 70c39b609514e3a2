//! Protection objectives: the naive adversarial loss, the pairwise
//! protective preference loss against a frozen reference, the combined
//! protection objective, and gradient-conflict diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptDataset;
use crate::denoiser::{ConditioningEmbedding, NoisePredictor};
use crate::diffusion::{draw_noise, forward_noise, Draw, LossReport, NoiseSchedule, Sample};
use crate::error::{ApdmError, Result};
use crate::personalization::{per_simple_loss, ppl_loss};

/// Result of the naive adversarial objective `−L^per_simple + λ·L_ppl`.
#[derive(Clone, Debug)]
pub struct AdvLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub per: LossReport,
    pub ppl: LossReport,
}

/// Subject draws precede prior draws, as in `per_objective`.
pub fn adv_loss<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    lambda: f64,
    rng: &mut R,
) -> Result<AdvLoss> {
    if !(lambda > 0.0) {
        return Err(ApdmError::config(format!("adv lambda = {lambda} must be > 0")));
    }
    let per = per_simple_loss(model, schedule, dataset, rng)?;
    let ppl = ppl_loss(model, schedule, dataset, rng)?;
    Ok(adv_from_parts(per, ppl, lambda))
}

pub(crate) fn adv_from_parts(per: LossReport, ppl: LossReport, lambda: f64) -> AdvLoss {
    let grad = per.grad.iter().zip(&ppl.grad).map(|(a, b)| lambda * b - a).collect();
    AdvLoss {
        value: lambda * ppl.value - per.value,
        grad,
        per,
        ppl,
    }
}

/// Positive/negative pairs and one `(t, ε)` per pair, used for both
/// members and for both the trainable and the reference model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    /// `(x₀⁺, x₀⁻)`
    pub pairs: Vec<(Sample, Sample)>,
    pub shared_draws: Vec<Draw>,
}

impl PairBatch {
    pub fn draw<R: Rng + ?Sized>(pairs: Vec<(Sample, Sample)>, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let d = pairs.first().map(|p| p.0.len()).ok_or_else(|| ApdmError::usage("pair batch is empty"))?;
        let shared_draws = draw_noise(schedule, pairs.len(), d, rng);
        Ok(PairBatch { pairs, shared_draws })
    }
}

#[derive(Clone, Debug)]
pub struct DpoReport {
    pub value: f64,
    pub grad: Vec<f64>,
    /// `r⁺ − r⁻` per pair.
    pub margins: Vec<f64>,
}

/// `log σ(u)`, stable for large |u|.
pub fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Squared error of `model` on one noised sample, with the output residual.
fn sq_err<M: NoisePredictor>(
    model: &M,
    x_t: &[f64],
    draw: &Draw,
    c: &ConditioningEmbedding,
) -> Result<(f64, Vec<f64>, M::Tape)> {
    let (pred, tape) = model.forward(x_t, draw.t, c)?;
    let resid: Vec<f64> = pred.iter().zip(draw.eps.iter()).map(|(p, e)| p - e).collect();
    Ok((resid.iter().map(|r| r * r).sum(), resid, tape))
}

/// Mean over pairs of `−log σ(−β(r⁺ − r⁻))` where
/// `r± = ‖ε_θ(x_t±) − ε‖² − ‖ε_φ(x_t±) − ε‖²`. The gradient is taken with
/// respect to θ only.
pub fn dpo_loss<M: NoisePredictor, P: NoisePredictor>(
    theta: &M,
    phi: &P,
    schedule: &NoiseSchedule,
    batch: &PairBatch,
    c: &ConditioningEmbedding,
    beta: f64,
) -> Result<DpoReport> {
    if !(beta > 0.0) {
        return Err(ApdmError::config(format!("dpo beta = {beta} must be > 0")));
    }
    if batch.pairs.is_empty() {
        return Err(ApdmError::usage("pair batch is empty"));
    }
    if batch.shared_draws.len() != batch.pairs.len() {
        return Err(ApdmError::usage("pair batch needs one shared draw per pair"));
    }
    let scale = 1.0 / batch.pairs.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; theta.n_params()];
    let mut margins = Vec::with_capacity(batch.pairs.len());
    for ((pos, neg), draw) in batch.pairs.iter().zip(&batch.shared_draws) {
        let x_pos = forward_noise(schedule, pos, draw.t, &draw.eps)?;
        let x_neg = forward_noise(schedule, neg, draw.t, &draw.eps)?;
        let (th_pos, res_pos, tape_pos) = sq_err(theta, &x_pos, draw, c)?;
        let (th_neg, res_neg, tape_neg) = sq_err(theta, &x_neg, draw, c)?;
        let (ph_pos, _, _) = sq_err(phi, &x_pos, draw, c)?;
        let (ph_neg, _, _) = sq_err(phi, &x_neg, draw, c)?;
        let margin = (th_pos - ph_pos) - (th_neg - ph_neg);
        let arg = -beta * margin;
        if !arg.is_finite() {
            return Err(ApdmError::numeric(format!("sigmoid argument {arg} is not finite")));
        }
        value -= scale * log_sigmoid(arg);
        // d/dθ [−log σ(−β m)] = β σ(β m) ∇m
        let w = scale * beta * sigmoid(-arg);
        let d_pos: Vec<f64> = res_pos.iter().map(|r| 2.0 * w * r).collect();
        let d_neg: Vec<f64> = res_neg.iter().map(|r| -2.0 * w * r).collect();
        theta.backward(&tape_pos, &d_pos, &mut grad);
        theta.backward(&tape_neg, &d_neg, &mut grad);
        margins.push(margin);
    }
    Ok(DpoReport { value, grad, margins })
}

#[derive(Clone, Debug)]
pub struct ProtectLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub dpo: DpoReport,
    pub ppl: LossReport,
    pub batch: PairBatch,
}

/// `L_protect = L_DPO + L_ppl` with the preference term under `c_per`.
/// Pair draws precede prior draws.
pub fn protect_loss<M: NoisePredictor, P: NoisePredictor, R: Rng + ?Sized>(
    theta: &M,
    phi: &P,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    beta: f64,
    rng: &mut R,
) -> Result<ProtectLoss> {
    protect_loss_with(theta, phi, schedule, dataset, &dataset.c_per, beta, rng)
}

/// [`protect_loss`] with an explicit conditioning for the preference term.
pub fn protect_loss_with<M: NoisePredictor, P: NoisePredictor, R: Rng + ?Sized>(
    theta: &M,
    phi: &P,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    dpo_cond: &ConditioningEmbedding,
    beta: f64,
    rng: &mut R,
) -> Result<ProtectLoss> {
    dataset.validate()?;
    let batch = PairBatch::draw(dataset.pairs(), schedule, rng)?;
    let dpo = dpo_loss(theta, phi, schedule, &batch, dpo_cond, beta)?;
    let ppl = ppl_loss(theta, schedule, dataset, rng)?;
    let grad = dpo.grad.iter().zip(&ppl.grad).map(|(a, b)| a + b).collect();
    Ok(ProtectLoss {
        value: dpo.value + ppl.value,
        grad,
        dpo,
        ppl,
        batch,
    })
}

/// Norms, inner product and first-order predicted loss changes of the two
/// components of the naive objective under a descent step of size `eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientDiagnostics {
    pub norm_per: f64,
    pub norm_ppl: f64,
    pub inner: f64,
    /// NaN when `degenerate`.
    pub cosine: f64,
    /// `η(‖g_per‖² − ⟨g_per, g_ppl⟩)`: predicted change of `L^per_simple`.
    pub taylor_per: f64,
    /// `η(⟨g_per, g_ppl⟩ − ‖g_ppl‖²)`: predicted change of `L_ppl`.
    pub taylor_ppl: f64,
    pub eta: f64,
    pub degenerate: bool,
}

impl GradientDiagnostics {
    pub fn from_gradients(g_per: &[f64], g_ppl: &[f64], eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(ApdmError::config(format!("diagnostics eta = {eta} must be > 0")));
        }
        if g_per.len() != g_ppl.len() {
            return Err(ApdmError::usage("gradient lengths differ"));
        }
        let sq_per: f64 = g_per.iter().map(|g| g * g).sum();
        let sq_ppl: f64 = g_ppl.iter().map(|g| g * g).sum();
        let inner: f64 = g_per.iter().zip(g_ppl).map(|(a, b)| a * b).sum();
        let (norm_per, norm_ppl) = (sq_per.sqrt(), sq_ppl.sqrt());
        let degenerate = norm_per == 0.0 || norm_ppl == 0.0;
        let cosine = if degenerate {
            f64::NAN
        } else {
            (inner / (norm_per * norm_ppl)).clamp(-1.0, 1.0)
        };
        Ok(GradientDiagnostics {
            norm_per,
            norm_ppl,
            inner,
            cosine,
            taylor_per: eta * (sq_per - inner),
            taylor_ppl: eta * (inner - sq_ppl),
            eta,
            degenerate,
        })
    }

    /// Both Taylor predictions favourable for the naive objective at once:
    /// subject loss rises and prior loss falls.
    pub fn both_objectives_improve(&self) -> bool {
        self.taylor_per > 0.0 && self.taylor_ppl < 0.0
    }
}

pub const DIAGNOSTIC_COLUMNS: [&str; 7] = ["step", "norm_per", "norm_ppl", "cosine", "inner", "taylor_per", "taylor_ppl"];

impl GradientDiagnostics {
    pub fn row(&self, step: usize) -> Vec<f64> {
        vec![
            step as f64,
            self.norm_per,
            self.norm_ppl,
            self.cosine,
            self.inner,
            self.taylor_per,
            self.taylor_ppl,
        ]
    }
}

/// Draws both component gradients (subject first, then prior) and
/// summarises their interaction.
pub fn diagnose<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    eta: f64,
    rng: &mut R,
) -> Result<(GradientDiagnostics, LossReport, LossReport)> {
    if !(eta > 0.0) {
        return Err(ApdmError::config(format!("diagnostics eta = {eta} must be > 0")));
    }
    let per = per_simple_loss(model, schedule, dataset, rng)?;
    let ppl = ppl_loss(model, schedule, dataset, rng)?;
    let diag = GradientDiagnostics::from_gradients(&per.grad, &ppl.grad, eta)?;
    Ok((diag, per, ppl))
}
