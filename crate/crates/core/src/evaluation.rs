//! Toy metrics: a nearest-neighbour kernel similarity to the protected
//! subject, and squared MMD against a reference draw of the class prior.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptDataset;
use crate::denoiser::{ConditioningEmbedding, NoisePredictor};
use crate::diffusion::{sample, NoiseSchedule, Sample};
use crate::error::{ApdmError, Result};
use crate::LabRng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(ApdmError::config(format!("bandwidth = {bandwidth} must be a positive real")));
    }
    Ok(())
}

/// Mean over `generated` of `exp(−‖x − NN(x)‖² / bandwidth²)`, with the
/// nearest neighbour taken in `subject`.
pub fn subject_similarity(generated: &[Sample], subject: &[Sample], bandwidth: f64) -> Result<f64> {
    check_bandwidth(bandwidth)?;
    if generated.is_empty() || subject.is_empty() {
        return Err(ApdmError::usage("subject_similarity needs two non-empty sets"));
    }
    let h2 = bandwidth * bandwidth;
    let total: f64 = generated
        .iter()
        .map(|x| {
            let nn = subject.iter().map(|s| sq_dist(x, s)).fold(f64::INFINITY, f64::min);
            (-nn / h2).exp()
        })
        .sum();
    Ok(total / generated.len() as f64)
}

/// Gaussian RBF `exp(−‖a − b‖² / (2h²))`.
pub fn rbf(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp()
}

fn mean_kernel(a: &[Sample], b: &[Sample], bandwidth: f64) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += rbf(x, y, bandwidth);
        }
    }
    total / (a.len() * b.len()) as f64
}

fn canonical_order(a: &[Sample], b: &[Sample]) -> bool {
    let flat = |set: &[Sample]| set.iter().flat_map(|x| x.iter().copied()).collect::<Vec<f64>>();
    let (fa, fb) = (flat(a), flat(b));
    for (x, y) in fa.iter().zip(&fb) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    fa.len() <= fb.len()
}

/// Biased (V-statistic) squared MMD with the Gaussian RBF kernel.
pub fn mmd2(a: &[Sample], b: &[Sample], bandwidth: f64) -> Result<f64> {
    check_bandwidth(bandwidth)?;
    if a.is_empty() || b.is_empty() {
        return Err(ApdmError::usage("mmd2 needs two non-empty sets"));
    }
    // evaluate in a canonical argument order so the result is exactly
    // symmetric despite floating-point summation order
    let (a, b) = if canonical_order(a, b) { (a, b) } else { (b, a) };
    let kaa = mean_kernel(a, a, bandwidth);
    let kbb = mean_kernel(b, b, bandwidth);
    let kab = mean_kernel(a, b, bandwidth);
    // round-off can push a V-statistic of identical sets a hair below 0
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// At most this many points enter the median heuristic.
pub const MEDIAN_HEURISTIC_CAP: usize = 512;

/// Median pairwise Euclidean distance over the first
/// [`MEDIAN_HEURISTIC_CAP`] points of `set`.
pub fn median_heuristic(set: &[Sample]) -> Result<f64> {
    let pts = &set[..set.len().min(MEDIAN_HEURISTIC_CAP)];
    if pts.len() < 2 {
        return Err(ApdmError::usage("median heuristic needs at least two points"));
    }
    let mut dists = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            dists.push(sq_dist(&pts[i], &pts[j]).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        Ok(median)
    } else {
        Err(ApdmError::numeric("median pairwise distance is zero"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Median heuristic over the fixed reference set of the comparison.
    Median,
}

/// Either a fixed bandwidth or a rule applied to reference data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BandwidthPolicy {
    Fixed(f64),
    Rule(BandwidthRule),
}

impl BandwidthPolicy {
    pub fn resolve(&self, reference: &[Sample]) -> Result<f64> {
        match *self {
            BandwidthPolicy::Fixed(h) => {
                check_bandwidth(h)?;
                Ok(h)
            }
            BandwidthPolicy::Rule(BandwidthRule::Median) => median_heuristic(reference),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub n_gen: usize,
    /// Resolved against the subject samples.
    pub subject_bandwidth: BandwidthPolicy,
    /// Resolved against the prior reference draw.
    pub mmd_bandwidth: BandwidthPolicy,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            n_gen: 512,
            subject_bandwidth: BandwidthPolicy::Fixed(0.25),
            mmd_bandwidth: BandwidthPolicy::Rule(BandwidthRule::Median),
        }
    }
}

/// Kernel widths used by one comparison. They depend on reference data
/// only, so every model in the comparison is scored with the same kernels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    pub subject: f64,
    pub mmd: f64,
}

impl Bandwidths {
    pub fn resolve(cfg: &MetricConfig, subject: &[Sample], reference: &[Sample]) -> Result<Self> {
        Ok(Bandwidths {
            subject: cfg.subject_bandwidth.resolve(subject)?,
            mmd: cfg.mmd_bandwidth.resolve(reference)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subject_similarity: f64,
    pub prior_mmd: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub bandwidths: Bandwidths,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        self.subject_similarity.is_finite() && self.prior_mmd.is_finite()
    }
}

/// Scores already-generated samples.
pub fn score_samples(
    generated_per: &[Sample],
    generated_pr: &[Sample],
    subject: &[Sample],
    reference: &[Sample],
    bandwidths: Bandwidths,
    seed: u64,
) -> Result<MetricReport> {
    Ok(MetricReport {
        subject_similarity: subject_similarity(generated_per, subject, bandwidths.subject)?,
        prior_mmd: mmd2(generated_pr, reference, bandwidths.mmd)?,
        n_samples: generated_per.len(),
        seed,
        bandwidths,
    })
}

/// Stream of `seed` used for the class-prompt samples, so prior MMD can be
/// recomputed on its own.
const PRIOR_STREAM: u64 = 1;

/// Squared MMD between `n_gen` samples under `c_pr` and `reference`, with
/// the same draws [`score_pipeline`] uses for its prior term.
pub fn prior_mmd<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    c_pr: &ConditioningEmbedding,
    reference: &[Sample],
    n_gen: usize,
    bandwidth: f64,
    seed: u64,
) -> Result<f64> {
    let pr = prior_samples(model, schedule, c_pr, n_gen, seed)?;
    mmd2(&pr, reference, bandwidth)
}

fn prior_samples<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    c_pr: &ConditioningEmbedding,
    n_gen: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if n_gen == 0 {
        return Err(ApdmError::usage("n_gen must be >= 1"));
    }
    let mut rng = LabRng::seed_from_u64(seed);
    rng.set_stream(PRIOR_STREAM);
    sample(model, schedule, c_pr, n_gen, &mut rng)
}

/// Generates `n_gen` samples under `c_per` (scored against the subject
/// samples) and `n_gen` under `c_pr` (scored against `reference`). The two
/// sets come from separate streams of `seed`.
pub fn score_pipeline<M: NoisePredictor>(
    model: &M,
    schedule: &NoiseSchedule,
    dataset: &ConceptDataset,
    reference: &[Sample],
    n_gen: usize,
    bandwidths: Bandwidths,
    seed: u64,
) -> Result<MetricReport> {
    if n_gen == 0 {
        return Err(ApdmError::usage("n_gen must be >= 1"));
    }
    let mut rng = LabRng::seed_from_u64(seed);
    let per = sample(model, schedule, &dataset.c_per, n_gen, &mut rng)?;
    let pr = prior_samples(model, schedule, &dataset.c_pr, n_gen, seed)?;
    score_samples(&per, &pr, &dataset.negatives, reference, bandwidths, seed)
}
