#![allow(dead_code)]

pub mod oracles;

use apdm_core::concepts::ConceptDataset;
use apdm_core::denoiser::{Arch, ConditionalDenoiser, ConditioningEmbedding, EmbeddingTag, TimeEmbedding};
use apdm_core::diffusion::{build_schedule, NoiseSchedule, Sample};
use apdm_core::LabRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

pub fn arch(hidden: &[usize]) -> Arch {
    Arch {
        sample_dim: 2,
        cond_dim: 4,
        hidden: hidden.to_vec(),
        time: TimeEmbedding {
            steps: 50,
            frequency: std::f64::consts::PI,
        },
    }
}

pub fn schedule() -> NoiseSchedule {
    build_schedule(50, 1e-3, 0.2).unwrap()
}

pub fn model(hidden: &[usize], seed: u64) -> ConditionalDenoiser {
    ConditionalDenoiser::init(arch(hidden), &mut rng(seed)).unwrap()
}

fn points<R: Rng>(n: usize, center: [f64; 2], spread: f64, rng: &mut R) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample(vec![center[0] + spread * rng.gen_range(-1.0..1.0), center[1] + spread * rng.gen_range(-1.0..1.0)]))
        .collect()
}

/// A small hand-made dataset: 3 subject points near (1.4, 1.4), prior
/// points scattered around the origin, reversed pairing.
pub fn dataset(seed: u64) -> ConceptDataset {
    let mut r = rng(seed ^ 0xda7a);
    ConceptDataset {
        negatives: points(3, [1.4, 1.4], 0.1, &mut r),
        positives: points(3, [0.0, 2.0], 0.5, &mut r),
        priors: points(5, [0.0, 0.0], 2.0, &mut r),
        pairing: vec![2, 0, 1],
        c_per: ConditioningEmbedding::standard(EmbeddingTag::Identifier, 4),
        c_pr: ConditioningEmbedding::standard(EmbeddingTag::Prior, 4),
    }
}

/// Model whose parameters are a small random perturbation of `base`.
pub fn perturbed(base: &ConditionalDenoiser, scale: f64, seed: u64) -> ConditionalDenoiser {
    let mut r = rng(seed);
    let mut m = base.clone();
    for p in m.params.0.iter_mut() {
        *p += scale * r.gen_range(-1.0..1.0);
    }
    m
}

pub const ARCHS: [&[usize]; 3] = [&[3], &[5, 4], &[4, 3, 3]];
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
