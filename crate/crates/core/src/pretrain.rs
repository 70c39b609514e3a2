//! Fitting the base model to the class prior.
//!
//! Pretraining stands in for the large-scale training of the backbone, so
//! it uses Adam on fresh minibatches from the world prior. Every later
//! stage uses plain gradient descent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::WorldSpec;
use crate::denoiser::{Arch, ConditionalDenoiser, ConditioningEmbedding};
use crate::diffusion::{simple_loss, NoiseSchedule};
use crate::error::{ApdmError, Result};
use crate::trace::ExperimentTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Learning rate at the last step, reached by cosine decay.
    pub final_lr: f64,
    pub batch_size: usize,
    /// Record a trace row every this many steps.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 12_000,
            lr: 3e-3,
            final_lr: 1e-4,
            batch_size: 128,
            log_every: 100,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

pub const PRETRAIN_COLUMNS: [&str; 3] = ["step", "loss", "lr"];

/// Initializes a model from `rng` and fits it to the world prior. Each step
/// draws a fresh minibatch and pairs it with one conditioning from
/// `conditionings`, cycling in order, so every prompt in the set maps to
/// the class distribution.
pub fn pretrain<R: Rng + ?Sized>(
    world: &WorldSpec,
    arch: Arch,
    schedule: &NoiseSchedule,
    conditionings: &[ConditioningEmbedding],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<(ConditionalDenoiser, ExperimentTrace)> {
    world.validate()?;
    if conditionings.is_empty() {
        return Err(ApdmError::config("pretraining needs at least one conditioning"));
    }
    if cfg.batch_size == 0 {
        return Err(ApdmError::config("pretrain.batch_size must be >= 1"));
    }
    if !(cfg.lr > 0.0) || !(cfg.final_lr > 0.0) {
        return Err(ApdmError::config("pretrain.lr and pretrain.final_lr must be > 0"));
    }
    let mut model = ConditionalDenoiser::init(arch, rng)?;
    let mut adam = Adam::new(model.params.len());
    let mut trace = ExperimentTrace::new("pretrain", &PRETRAIN_COLUMNS);
    let mut running = 0.0;
    let mut count = 0usize;
    for step in 0..cfg.steps {
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.final_lr + 0.5 * (cfg.lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos());
        let batch = world.draw_prior(cfg.batch_size, rng);
        let c = &conditionings[step % conditionings.len()];
        let rep = simple_loss(&model, schedule, &batch, c, rng)?;
        if !rep.value.is_finite() {
            return Err(ApdmError::numeric(format!("pretraining loss not finite at step {step}")));
        }
        adam.step(&mut model.params, &rep.grad, lr);
        running += rep.value;
        count += 1;
        if cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
            trace.push(vec![(step + 1) as f64, running / count as f64, lr]);
            running = 0.0;
            count = 0;
        }
    }
    Ok((model, trace))
}
