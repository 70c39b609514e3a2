//! Synthetic worlds: a Gaussian-mixture "class" prior with narrow
//! "subject" components, and the paired preference dataset built from a
//! pretrained model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionalDenoiser, ConditioningEmbedding, EmbeddingTag};
use crate::diffusion::{sample, NoiseSchedule, Sample};
use crate::error::{ApdmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub std: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectComponent {
    pub name: String,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub dim: usize,
    pub prior_mixture: Vec<MixtureComponent>,
    pub subjects: Vec<SubjectComponent>,
}

impl Default for WorldSpec {
    /// Four-mode ring of radius 2 (std 0.35) with tight subjects
    /// (std 0.05) sitting on the ring halfway between modes.
    fn default() -> Self {
        let ring = |deg: f64, r: f64| {
            let a = deg.to_radians();
            vec![r * a.cos(), r * a.sin()]
        };
        WorldSpec {
            dim: 2,
            prior_mixture: (0..4)
                .map(|k| MixtureComponent {
                    mean: ring(90.0 * k as f64, 2.0),
                    std: 0.35,
                    weight: 0.25,
                })
                .collect(),
            subjects: [("subject_a", 45.0), ("subject_b", 225.0), ("subject_c", 135.0), ("subject_d", 315.0)]
                .into_iter()
                .map(|(name, deg)| SubjectComponent {
                    name: name.to_string(),
                    mean: ring(deg, 2.0),
                    std: 0.05,
                })
                .collect(),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prior_mixture.is_empty() {
            return Err(ApdmError::config("world.prior_mixture is empty"));
        }
        let total: f64 = self.prior_mixture.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ApdmError::config(format!("world.prior_mixture weights sum to {total}, not 1")));
        }
        for (i, c) in self.prior_mixture.iter().enumerate() {
            if c.mean.len() != self.dim {
                return Err(ApdmError::config(format!("world.prior_mixture[{i}].mean has wrong dimension")));
            }
            if !(c.std > 0.0) || !(c.weight >= 0.0) {
                return Err(ApdmError::config(format!("world.prior_mixture[{i}] needs std > 0 and weight >= 0")));
            }
        }
        let min_prior_std = self.prior_mixture.iter().map(|c| c.std).fold(f64::INFINITY, f64::min);
        for (i, s) in self.subjects.iter().enumerate() {
            if s.mean.len() != self.dim {
                return Err(ApdmError::config(format!("world.subjects[{i}].mean has wrong dimension")));
            }
            if !(s.std >= 0.0 && s.std < min_prior_std) {
                return Err(ApdmError::config(format!(
                    "world.subjects[{i}].std = {} must be in [0, {min_prior_std})",
                    s.std
                )));
            }
        }
        Ok(())
    }

    pub fn subject(&self, index: usize) -> Result<&SubjectComponent> {
        self.subjects.get(index).ok_or(ApdmError::Index {
            what: "subject",
            index,
            lo: 0,
            hi: self.subjects.len().saturating_sub(1),
        })
    }

    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for c in &self.prior_mixture {
            for (m, v) in mean.iter_mut().zip(&c.mean) {
                *m += c.weight * v;
            }
        }
        mean
    }

    /// Per-coordinate variance of the mixture.
    pub fn mixture_variance(&self) -> Vec<f64> {
        let mean = self.mixture_mean();
        (0..self.dim)
            .map(|k| {
                self.prior_mixture
                    .iter()
                    .map(|c| c.weight * (c.std * c.std + c.mean[k] * c.mean[k]))
                    .sum::<f64>()
                    - mean[k] * mean[k]
            })
            .collect()
    }

    pub fn draw_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = self.prior_mixture.len() - 1;
                for (i, c) in self.prior_mixture.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                let c = &self.prior_mixture[chosen];
                gaussian(&c.mean, c.std, rng)
            })
            .collect()
    }

    pub fn draw_subject<R: Rng + ?Sized>(&self, index: usize, n: usize, rng: &mut R) -> Result<Vec<Sample>> {
        let s = self.subject(index)?;
        Ok((0..n).map(|_| gaussian(&s.mean, s.std, rng)).collect())
    }
}

fn gaussian<R: Rng + ?Sized>(mean: &[f64], std: f64, rng: &mut R) -> Sample {
    Sample(
        mean.iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + std * z
            })
            .collect(),
    )
}

/// Subject samples plus a large reference draw from the prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldDraw {
    pub subject: Vec<Sample>,
    pub reference: Vec<Sample>,
}

/// Draws `n_subject` samples of subject `subject_index` (first), then
/// `n_reference` prior samples.
pub fn gen_world<R: Rng + ?Sized>(
    spec: &WorldSpec,
    subject_index: usize,
    n_subject: usize,
    n_reference: usize,
    rng: &mut R,
) -> Result<WorldDraw> {
    spec.validate()?;
    if n_subject == 0 {
        return Err(ApdmError::usage("n_subject must be >= 1"));
    }
    let subject = spec.draw_subject(subject_index, n_subject, rng)?;
    let reference = spec.draw_prior(n_reference, rng);
    Ok(WorldDraw { subject, reference })
}

/// Negatives (subject images), generated positives paired one-to-one with
/// them, generated prior-preservation samples, and the two prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDataset {
    pub negatives: Vec<Sample>,
    pub positives: Vec<Sample>,
    pub priors: Vec<Sample>,
    /// `pairing[i]` is the index into `positives` paired with `negatives[i]`.
    pub pairing: Vec<usize>,
    pub c_per: ConditioningEmbedding,
    pub c_pr: ConditioningEmbedding,
}

impl ConceptDataset {
    pub fn validate(&self) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(ApdmError::usage("dataset has no negatives"));
        }
        if self.positives.len() != self.negatives.len() || self.pairing.len() != self.negatives.len() {
            return Err(ApdmError::usage("positives, negatives and pairing must have equal length"));
        }
        let mut seen = vec![false; self.pairing.len()];
        for &j in &self.pairing {
            if j >= seen.len() || seen[j] {
                return Err(ApdmError::usage("pairing is not a bijection"));
            }
            seen[j] = true;
        }
        if self.c_per.tag != EmbeddingTag::Identifier || self.c_pr.tag != EmbeddingTag::Prior {
            return Err(ApdmError::usage("c_per must be tagged identifier and c_pr prior"));
        }
        Ok(())
    }

    /// `(positive, negative)` pairs in negative order.
    pub fn pairs(&self) -> Vec<(Sample, Sample)> {
        self.negatives
            .iter()
            .zip(&self.pairing)
            .map(|(neg, &j)| (self.positives[j].clone(), neg.clone()))
            .collect()
    }

    /// Same dataset with different negatives (e.g. a transformed attack
    /// set); positives and pairing are kept when the count matches.
    pub fn with_negatives(&self, negatives: Vec<Sample>) -> Result<Self> {
        if negatives.len() != self.negatives.len() {
            return Err(ApdmError::usage("replacement negatives must keep the dataset size"));
        }
        Ok(ConceptDataset {
            negatives,
            ..self.clone()
        })
    }
}

/// Positives are sampled first (`|subject|` of them under `c_pr`), then
/// `n_prior` prior-preservation samples, then the pairing permutation is
/// shuffled. All from `rng`, in that order.
pub fn build_concept_dataset<R: Rng + ?Sized>(
    pretrained: &ConditionalDenoiser,
    schedule: &NoiseSchedule,
    subject: &[Sample],
    c_per: ConditioningEmbedding,
    c_pr: ConditioningEmbedding,
    n_prior: usize,
    rng: &mut R,
) -> Result<ConceptDataset> {
    if subject.is_empty() {
        return Err(ApdmError::usage("subject set is empty"));
    }
    let positives = sample(pretrained, schedule, &c_pr, subject.len(), rng)?;
    let priors = sample(pretrained, schedule, &c_pr, n_prior, rng)?;
    let mut pairing: Vec<usize> = (0..subject.len()).collect();
    pairing.shuffle(rng);
    let dataset = ConceptDataset {
        negatives: subject.to_vec(),
        positives,
        priors,
        pairing,
        c_per,
        c_pr,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// On-disk form of a dataset together with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub world: WorldSpec,
    pub subject_index: usize,
    pub seed: u64,
    pub reference: Vec<Sample>,
    pub dataset: ConceptDataset,
}

impl DatasetRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let record: DatasetRecord = serde_json::from_slice(&std::fs::read(path)?)?;
        record.dataset.validate()?;
        Ok(record)
    }
}
