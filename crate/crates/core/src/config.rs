//! Experiment configuration (TOML) and seed derivation.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Key names are part of the on-disk contract; see the README for the
//! full listing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ScheduleParams;
use crate::concepts::WorldSpec;
use crate::denoiser::{Arch, ConditioningEmbedding, EmbeddingTag, TimeEmbedding};
use crate::diffusion::{build_schedule, NoiseSchedule};
use crate::error::{ApdmError, Result};
use crate::evaluation::MetricConfig;
use crate::l2p::L2PConfig;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    /// ω in the time feature `(sin(ω·t/T), cos(ω·t/T))`.
    pub time_frequency: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![32, 32],
            cond_dim: 4,
            time_frequency: std::f64::consts::PI,
        }
    }
}

/// Conditioning vectors for the class prompt, the protected identifier
/// and a spare identifier. Lengths must equal `arch.cond_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub prior: Vec<f64>,
    pub identifier: Vec<f64>,
    pub other: Vec<f64>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            prior: ConditioningEmbedding::standard(EmbeddingTag::Prior, 4).vector,
            identifier: ConditioningEmbedding::standard(EmbeddingTag::Identifier, 4).vector,
            other: ConditioningEmbedding::standard(EmbeddingTag::Other, 4).vector,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Index into `world.subjects` of the subject to protect.
    pub subject: usize,
    pub n_subject: usize,
    pub n_reference: usize,
    /// Generated class samples for the prior-preservation loss.
    pub n_prior: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            subject: 0,
            n_subject: 6,
            n_reference: 1000,
            n_prior: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeConfig {
    pub steps: usize,
    /// Backbone-scale fine-tuning uses 5e-6 with AdamW; plain descent on
    /// the toy network uses a larger step.
    pub lr: f64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig { steps: 2000, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NaiveConfig {
    pub lambda: f64,
    /// Outer steps; the learning rate is `l2p.gamma_protect`.
    pub steps: usize,
    /// Record prior MMD every this many steps in the collapse scenario.
    pub mmd_every: usize,
    pub lambda_sweep: Vec<f64>,
}

impl Default for NaiveConfig {
    fn default() -> Self {
        NaiveConfig {
            lambda: 1.0,
            steps: 800,
            mmd_every: 100,
            lambda_sweep: vec![0.1, 1.0, 10.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Std of the additive jitter standing in for blur.
    pub jitter_std: f64,
    pub unseen_counts: Vec<usize>,
    pub n_per_sweep: Vec<usize>,
    pub beta_sweep: Vec<f64>,
    /// Subject used by the other-subject preservation check.
    pub other_subject: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            jitter_std: 0.02,
            unseen_counts: vec![4, 8, 12],
            n_per_sweep: vec![5, 10, 20],
            beta_sweep: vec![1.0, 10.0, 100.0],
            other_subject: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub arch: ArchConfig,
    pub embeddings: EmbeddingConfig,
    pub pretrain: PretrainConfig,
    pub personalize: PersonalizeConfig,
    pub l2p: L2PConfig,
    pub naive: NaiveConfig,
    pub metrics: MetricConfig,
    pub scenario: ScenarioConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world: WorldSpec::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            arch: ArchConfig::default(),
            embeddings: EmbeddingConfig::default(),
            pretrain: PretrainConfig::default(),
            personalize: PersonalizeConfig::default(),
            l2p: L2PConfig::default(),
            naive: NaiveConfig::default(),
            metrics: MetricConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ApdmError::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.world.subject(self.data.subject)?;
        self.schedule()?;
        self.arch().validate()?;
        self.l2p.validate()?;
        let e = &self.embeddings;
        for (name, v) in [("prior", &e.prior), ("identifier", &e.identifier), ("other", &e.other)] {
            if v.len() != self.arch.cond_dim {
                return Err(ApdmError::config(format!(
                    "embeddings.{name} has length {}, arch.cond_dim is {}",
                    v.len(),
                    self.arch.cond_dim
                )));
            }
        }
        if e.prior == e.identifier || e.prior == e.other || e.identifier == e.other {
            return Err(ApdmError::config("embeddings.prior, embeddings.identifier and embeddings.other must be distinct"));
        }
        if self.data.n_subject == 0 {
            return Err(ApdmError::config("data.n_subject must be >= 1"));
        }
        if self.data.n_reference < 2 || self.data.n_prior == 0 {
            return Err(ApdmError::config("data.n_reference must be >= 2 and data.n_prior >= 1"));
        }
        if !(self.personalize.lr > 0.0) {
            return Err(ApdmError::config("personalize.lr must be > 0"));
        }
        if !(self.naive.lambda > 0.0) {
            return Err(ApdmError::config("naive.lambda must be > 0"));
        }
        if self.metrics.n_gen == 0 {
            return Err(ApdmError::config("metrics.n_gen must be >= 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            sample_dim: self.world.dim,
            cond_dim: self.arch.cond_dim,
            hidden: self.arch.hidden.clone(),
            time: TimeEmbedding {
                steps: self.schedule.steps,
                frequency: self.arch.time_frequency,
            },
        }
    }

    pub fn embedding(&self, tag: EmbeddingTag) -> ConditioningEmbedding {
        let e = &self.embeddings;
        let vector = match tag {
            EmbeddingTag::Prior => e.prior.clone(),
            EmbeddingTag::Identifier => e.identifier.clone(),
            EmbeddingTag::Other => e.other.clone(),
        };
        ConditioningEmbedding { vector, tag }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(json))
    }

    /// Independent 64-bit seed for a named stage of this experiment.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

/// First 8 bytes of `SHA-256(seed_le || label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
