//! Linear noise schedule, forward noising, the denoising loss and the
//! ancestral sampler.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningEmbedding, NoisePredictor};
use crate::error::{ApdmError, Result};

/// A point in sample space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sample(pub Vec<f64>);

impl Sample {
    pub fn zeros(d: usize) -> Self {
        Sample(vec![0.0; d])
    }

    pub fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        Sample((0..d).map(|_| rng.sample(StandardNormal)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for Sample {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Sample {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Sample {
    fn from(v: Vec<f64>) -> Self {
        Sample(v)
    }
}

/// Discrete schedule, stored 0-based but addressed with 1-based `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(ApdmError::Index {
                what: "t",
                index: t,
                lo: 1,
                hi: self.steps,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)` for `t ≥ 2`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        debug_assert!(t >= 2);
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// Linear betas from `beta_start` to `beta_end` inclusive.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(ApdmError::config("schedule.steps must be >= 1"));
    }
    if !(beta_start > 0.0) {
        return Err(ApdmError::config(format!(
            "schedule.beta_start = {beta_start} must be > 0"
        )));
    }
    if !(beta_end < 1.0) {
        return Err(ApdmError::config(format!(
            "schedule.beta_end = {beta_end} must be < 1"
        )));
    }
    if !(beta_start <= beta_end) {
        return Err(ApdmError::config(format!(
            "schedule.beta_start = {beta_start} exceeds schedule.beta_end = {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas,
        alpha_bars,
    })
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Sample> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(ApdmError::usage(format!(
            "x0 has dimension {}, eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Sample(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()))
}

/// One recorded `(t, ε)` draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub t: usize,
    pub eps: Sample,
}

/// Draws `(t, ε)` for each of `n` batch elements: `t ~ U{1..T}` first,
/// then the `d` coordinates of `ε`.
pub fn draw_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    n: usize,
    d: usize,
    rng: &mut R,
) -> Vec<Draw> {
    (0..n)
        .map(|_| {
            let t = rng.gen_range(1..=schedule.steps);
            Draw {
                t,
                eps: Sample::standard_normal(d, rng),
            }
        })
        .collect()
}

/// Loss value, its parameter gradient, and the draws that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub grad: Vec<f64>,
    pub draws: Vec<Draw>,
}

/// Mean of `‖ε_θ(x_t, t, c) − ε‖²` over `batch`, with fresh draws from `rng`.
pub fn simple_loss<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    batch: &[Sample],
    c: &ConditioningEmbedding,
    rng: &mut R,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(ApdmError::usage("simple_loss called with an empty batch"));
    }
    let draws = draw_noise(schedule, batch.len(), model.sample_dim(), rng);
    simple_loss_replay(model, schedule, batch, c, draws)
}

/// [`simple_loss`] evaluated on previously recorded draws.
pub fn simple_loss_replay<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    batch: &[Sample],
    c: &ConditioningEmbedding,
    draws: Vec<Draw>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(ApdmError::usage("simple_loss called with an empty batch"));
    }
    if draws.len() != batch.len() {
        return Err(ApdmError::usage(format!(
            "{} draws supplied for a batch of {}",
            draws.len(),
            batch.len()
        )));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for (x0, draw) in batch.iter().zip(&draws) {
        let x_t = forward_noise(schedule, x0, draw.t, &draw.eps)?;
        let (pred, tape) = model.forward(&x_t, draw.t, c)?;
        let resid: Vec<f64> = pred.iter().zip(draw.eps.iter()).map(|(p, e)| p - e).collect();
        value += resid.iter().map(|r| r * r).sum::<f64>() * scale;
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
        model.backward(&tape, &d_out, &mut grad);
    }
    Ok(LossReport { value, grad, draws })
}

/// Ancestral reverse recursion from `x_T ~ N(0, I)`.
///
/// Uses the posterior variance `β̃_t` for `t ≥ 2` and no noise on the
/// final step. Random draws are consumed sample by sample: `x_T` first,
/// then one `z` per step `t = T..2`.
pub fn sample<M: NoisePredictor, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    c: &ConditioningEmbedding,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(ApdmError::usage("sample count must be >= 1"));
    }
    let d = model.sample_dim();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = Sample::standard_normal(d, rng);
        for t in (1..=schedule.steps).rev() {
            let eps_hat = model.predict(&x, t, c)?;
            let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
            let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
            for (xi, ei) in x.iter_mut().zip(&eps_hat) {
                *xi = inv_sqrt_alpha * (*xi - coef * ei);
            }
            if t > 1 {
                let sigma = schedule.posterior_variance(t).sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += sigma * z;
                }
            }
        }
        if !x.is_finite() {
            return Err(ApdmError::numeric("sampler produced a non-finite sample"));
        }
        out.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Arch, ConditionalDenoiser, EmbeddingTag, ParamVector, TimeEmbedding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.betas, vec![0.1]);
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn fifty_step_alpha_bar_matches_product_oracle() {
        let s = build_schedule(50, 1e-3, 0.2).unwrap();
        let mut prod = 1.0;
        for i in 0..50 {
            let beta = 1e-3 + (0.2 - 1e-3) * (i as f64) / 49.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(50) - prod).abs() < 1e-12);
        assert!(s.alpha_bar(50) < 0.01);
    }

    #[test]
    fn invalid_ranges_name_the_bound() {
        let msg = |r: Result<NoiseSchedule>| match r {
            Err(ApdmError::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(msg(build_schedule(0, 0.1, 0.2)).contains("steps"));
        assert!(msg(build_schedule(5, 0.0, 0.2)).contains("beta_start"));
        assert!(msg(build_schedule(5, 0.1, 1.0)).contains("beta_end"));
        assert!(msg(build_schedule(5, 0.3, 0.2)).contains("exceeds"));
    }

    #[test]
    fn forward_noise_cases() {
        let s = build_schedule(2, 0.1, 0.2).unwrap();
        let x = forward_noise(&s, &[1.0, 0.0], 2, &[1.0, 1.0]).unwrap();
        let (a, b) = (0.72f64.sqrt(), 0.28f64.sqrt());
        assert!((x[0] - (a + b)).abs() < 1e-15);
        assert!((x[1] - b).abs() < 1e-15);

        let x = forward_noise(&s, &[2.0, -1.0], 1, &[0.0, 0.0]).unwrap();
        assert_eq!(x.0, vec![0.9f64.sqrt() * 2.0, -(0.9f64.sqrt())]);
        let x = forward_noise(&s, &[0.0, 0.0], 1, &[0.5, 3.0]).unwrap();
        let b1 = (1.0 - s.alpha_bar(1)).sqrt();
        assert_eq!(x.0, vec![b1 * 0.5, b1 * 3.0]);

        assert!(matches!(
            forward_noise(&s, &[0.0, 0.0], 3, &[0.0, 0.0]),
            Err(ApdmError::Index { index: 3, .. })
        ));
    }

    #[test]
    fn forward_noise_variance_matches_schedule() {
        let s = build_schedule(50, 1e-3, 0.2).unwrap();
        let t = 20;
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = [0.7, -0.4];
        let xs: Vec<Sample> = (0..n)
            .map(|_| forward_noise(&s, &x0, t, &Sample::standard_normal(2, &mut rng)).unwrap())
            .collect();
        let target = 1.0 - s.alpha_bar(t);
        for k in 0..2 {
            let mean = xs.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // sd of the sample variance of a Gaussian: σ²·√(2/(n−1))
            let band = 3.0 * target * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - target).abs() < band, "var {var} vs {target}");
        }
    }

    fn zero_model(steps: usize) -> ConditionalDenoiser {
        let arch = Arch {
            sample_dim: 2,
            cond_dim: 4,
            hidden: vec![3],
            time: TimeEmbedding { steps, frequency: 1.0 },
        };
        let n = arch.n_params();
        ConditionalDenoiser::from_params(arch, ParamVector::zeros(n)).unwrap()
    }

    #[test]
    fn zero_denoiser_loss_is_noise_norm() {
        let s = build_schedule(10, 1e-3, 0.2).unwrap();
        let model = zero_model(10);
        let c = ConditioningEmbedding::standard(EmbeddingTag::Prior, 4);
        let batch = vec![Sample(vec![1.0, 2.0]), Sample(vec![-0.5, 0.0]), Sample(vec![0.0, 0.3])];
        let rep = simple_loss(&model, &s, &batch, &c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let want = rep.draws.iter().map(|d| d.eps.iter().map(|e| e * e).sum::<f64>()).sum::<f64>() / 3.0;
        assert!((rep.value - want).abs() < 1e-14);
        assert!(matches!(
            simple_loss(&model, &s, &[], &c, &mut ChaCha8Rng::seed_from_u64(4)),
            Err(ApdmError::Usage(_))
        ));
    }

    #[test]
    fn one_step_sampler_by_hand() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        let model = zero_model(1);
        let c = ConditioningEmbedding::standard(EmbeddingTag::Prior, 4);
        let out = sample(&model, &s, &c, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let x1 = Sample::standard_normal(2, &mut ChaCha8Rng::seed_from_u64(9));
        for k in 0..2 {
            assert!((out[0][k] - x1[k] / 0.9f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_rejects_zero() {
        let s = build_schedule(8, 1e-3, 0.2).unwrap();
        let arch = Arch {
            sample_dim: 2,
            cond_dim: 4,
            hidden: vec![6],
            time: TimeEmbedding { steps: 8, frequency: 1.0 },
        };
        let model = ConditionalDenoiser::init(arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c = ConditioningEmbedding::standard(EmbeddingTag::Prior, 4);
        let a = sample(&model, &s, &c, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample(&model, &s, &c, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bits = |v: &Vec<Sample>| v.iter().flat_map(|x| x.iter().map(|f| f.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(matches!(
            sample(&model, &s, &c, 0, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(ApdmError::Usage(_))
        ));
    }
}
