//! Protect-then-attack pipelines and their robustness variants.
//!
//! A [`Lab`] holds everything that does not depend on the protection
//! method: the pretrained model, the subject dataset, the prior reference
//! draw, the metric kernels and the two fixtures every verdict is judged
//! against (the pretrained model's scores and the unprotected
//! personalization baseline). Each stage draws from its own stream,
//! derived from the experiment seed and a stage label.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::concepts::{build_concept_dataset, gen_world, ConceptDataset};
use crate::config::ExperimentConfig;
use crate::denoiser::{ConditionalDenoiser, ConditioningEmbedding, EmbeddingTag};
use crate::diffusion::{NoiseSchedule, Sample};
use crate::error::{ApdmError, Result};
use crate::evaluation::{mmd2, prior_mmd, score_pipeline, Bandwidths, MetricReport};
use crate::l2p::{dpo_protect, l2p_protect, naive_protect, L2PConfig};
use crate::personalization::personalize;
use crate::pretrain::pretrain;
use crate::trace::ExperimentTrace;
use crate::LabRng;

/// Attacked similarity must fall to at most this fraction of the
/// unprotected baseline for protection to count as effective.
pub const PROTECTION_RATIO: f64 = 0.5;
/// Safeguarded prior MMD may grow to at most this multiple of the
/// pretrained model's.
pub const PRESERVATION_RATIO: f64 = 1.5;
/// Other-subject personalization must reach this fraction of its
/// unprotected baseline.
pub const OTHER_SUBJECT_RATIO: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectMode {
    None,
    Naive,
    DpoOnly,
    L2p,
}

impl ProtectMode {
    pub fn label(&self) -> &'static str {
        match self {
            ProtectMode::None => "none",
            ProtectMode::Naive => "naive",
            ProtectMode::DpoOnly => "dpo_only",
            ProtectMode::L2p => "l2p",
        }
    }
}

/// Pretrains a base model for `cfg` (independent of the chosen subject).
pub fn pretrain_for(cfg: &ExperimentConfig) -> Result<(ConditionalDenoiser, ExperimentTrace)> {
    let schedule = cfg.schedule()?;
    let conds = [
        cfg.embedding(EmbeddingTag::Prior),
        cfg.embedding(EmbeddingTag::Identifier),
        cfg.embedding(EmbeddingTag::Other),
    ];
    let mut rng = LabRng::seed_from_u64(cfg.stage_seed("pretrain"));
    pretrain(&cfg.world, cfg.arch(), &schedule, &conds, &cfg.pretrain, &mut rng)
}

/// Everything the stages share once a pretrained model exists.
pub struct StageData {
    pub schedule: NoiseSchedule,
    pub dataset: ConceptDataset,
    pub reference: Vec<Sample>,
    pub bandwidths: Bandwidths,
}

/// Draws the subject and reference sets and builds the concept dataset
/// (whose priors are sampled from `pretrained`).
pub fn stage_data(cfg: &ExperimentConfig, pretrained: &ConditionalDenoiser) -> Result<StageData> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let subject = cfg.data.subject;
    let mut world_rng = LabRng::seed_from_u64(cfg.stage_seed(&format!("world/{subject}")));
    let draw = gen_world(&cfg.world, subject, cfg.data.n_subject, cfg.data.n_reference, &mut world_rng)?;
    let mut data_rng = LabRng::seed_from_u64(cfg.stage_seed(&format!("dataset/{subject}")));
    let dataset = build_concept_dataset(
        pretrained,
        &schedule,
        &draw.subject,
        cfg.embedding(EmbeddingTag::Identifier),
        cfg.embedding(EmbeddingTag::Prior),
        cfg.data.n_prior,
        &mut data_rng,
    )?;
    let bandwidths = Bandwidths::resolve(&cfg.metrics, &dataset.negatives, &draw.reference)?;
    Ok(StageData {
        schedule,
        dataset,
        reference: draw.reference,
        bandwidths,
    })
}

pub struct Lab {
    pub cfg: ExperimentConfig,
    pub schedule: NoiseSchedule,
    pub pretrained: ConditionalDenoiser,
    pub dataset: ConceptDataset,
    pub reference: Vec<Sample>,
    pub bandwidths: Bandwidths,
    pub pretrained_report: MetricReport,
    pub baseline: ConditionalDenoiser,
    pub baseline_report: MetricReport,
}

impl Lab {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let (pretrained, _) = pretrain_for(cfg)?;
        Self::with_pretrained(cfg, pretrained)
    }

    /// Builds the lab around an already pretrained model (which must come
    /// from [`pretrain_for`] with the same config for reproducibility).
    pub fn with_pretrained(cfg: &ExperimentConfig, pretrained: ConditionalDenoiser) -> Result<Self> {
        let mut lab = Self::bare(cfg, pretrained)?;
        lab.pretrained_report = lab.score(&lab.pretrained)?;
        lab.baseline = lab.attack(&lab.pretrained, &lab.dataset)?;
        lab.baseline_report = lab.score(&lab.baseline)?;
        Ok(lab)
    }

    /// A lab without its fixtures: both reports are NaN and `baseline` is
    /// the pretrained model. Enough for single stages (protect, attack,
    /// score), not for verdicts.
    pub fn bare(cfg: &ExperimentConfig, pretrained: ConditionalDenoiser) -> Result<Self> {
        let StageData {
            schedule,
            dataset,
            reference,
            bandwidths,
        } = stage_data(cfg, &pretrained)?;
        let unscored = MetricReport {
            subject_similarity: f64::NAN,
            prior_mmd: f64::NAN,
            n_samples: 0,
            seed: 0,
            bandwidths,
        };
        Ok(Lab {
            cfg: cfg.clone(),
            schedule,
            pretrained_report: unscored.clone(),
            baseline: pretrained.clone(),
            baseline_report: unscored,
            pretrained,
            dataset,
            reference,
            bandwidths,
        })
    }

    pub fn eval_seed(&self) -> u64 {
        self.cfg.stage_seed("eval")
    }

    pub fn score(&self, model: &ConditionalDenoiser) -> Result<MetricReport> {
        self.score_on(model, &self.dataset)
    }

    /// Scores `model` with `dataset`'s prompts and subject samples.
    pub fn score_on(&self, model: &ConditionalDenoiser, dataset: &ConceptDataset) -> Result<MetricReport> {
        score_pipeline(
            model,
            &self.schedule,
            dataset,
            &self.reference,
            self.cfg.metrics.n_gen,
            self.bandwidths,
            self.eval_seed(),
        )
    }

    /// Prior MMD only (class-prompt samples against the reference).
    pub fn prior_mmd(&self, model: &ConditionalDenoiser) -> Result<f64> {
        prior_mmd(
            model,
            &self.schedule,
            &self.dataset.c_pr,
            &self.reference,
            self.cfg.metrics.n_gen,
            self.bandwidths.mmd,
            self.eval_seed(),
        )
    }

    /// Expected squared MMD between `n` fresh prior draws and the
    /// reference set, averaged over `repeats` draws.
    pub fn prior_draw_mmd(&self, n: usize, repeats: usize) -> Result<f64> {
        let mut rng = LabRng::seed_from_u64(self.cfg.stage_seed("prior-draw-mmd"));
        let mut total = 0.0;
        for _ in 0..repeats {
            let draw = self.cfg.world.draw_prior(n, &mut rng);
            total += mmd2(&draw, &self.reference, self.bandwidths.mmd)?;
        }
        Ok(total / repeats as f64)
    }

    /// The attacker: personalization with the configured budget.
    pub fn attack(&self, model: &ConditionalDenoiser, dataset: &ConceptDataset) -> Result<ConditionalDenoiser> {
        Ok(self.attack_traced(model, dataset)?.0)
    }

    pub fn attack_traced(
        &self,
        model: &ConditionalDenoiser,
        dataset: &ConceptDataset,
    ) -> Result<(ConditionalDenoiser, ExperimentTrace)> {
        let mut rng = LabRng::seed_from_u64(self.cfg.stage_seed("attack"));
        personalize(
            model,
            &self.schedule,
            dataset,
            self.cfg.personalize.steps,
            self.cfg.personalize.lr,
            &mut rng,
        )
    }

    /// Runs the protection method `mode` from the pretrained model.
    pub fn protect(&self, mode: ProtectMode, l2p: &L2PConfig) -> Result<(ConditionalDenoiser, ExperimentTrace)> {
        let mut rng = LabRng::seed_from_u64(self.cfg.stage_seed("protect"));
        let mut l2p = l2p.clone();
        l2p.monitor_seed = self.cfg.stage_seed("protect-monitor");
        match mode {
            ProtectMode::None => Ok((self.pretrained.clone(), ExperimentTrace::new("none", &[]))),
            ProtectMode::Naive => {
                let (model, losses, _) = naive_protect(
                    &self.pretrained,
                    &self.schedule,
                    &self.dataset,
                    l2p.n_protect,
                    l2p.gamma_protect,
                    self.cfg.naive.lambda,
                    &mut rng,
                    |_, _| Ok(()),
                )?;
                Ok((model, losses))
            }
            ProtectMode::DpoOnly => dpo_protect(
                &self.pretrained,
                &self.pretrained,
                &self.schedule,
                &self.dataset,
                l2p.n_protect,
                l2p.gamma_protect,
                l2p.beta,
                &mut rng,
            ),
            ProtectMode::L2p => {
                let (model, trace) = l2p_protect(&self.pretrained, &self.pretrained, &self.schedule, &self.dataset, &l2p, &mut rng)?;
                Ok((model, trace.outer))
            }
        }
    }

    /// Dataset for attacking with different subject samples. Positives are
    /// cycled to the new size; the attacker never reads them.
    pub fn attack_dataset(&self, negatives: Vec<Sample>) -> ConceptDataset {
        let n = negatives.len();
        let positives = (0..n).map(|i| self.dataset.positives[i % self.dataset.positives.len()].clone()).collect();
        ConceptDataset {
            negatives,
            positives,
            priors: self.dataset.priors.clone(),
            pairing: (0..n).collect(),
            c_per: self.dataset.c_per.clone(),
            c_pr: self.dataset.c_pr.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub mode: ProtectMode,
    pub seed: u64,
    pub subject: usize,
    pub config_hash: String,
    pub pretrained: MetricReport,
    pub baseline: MetricReport,
    pub protected: MetricReport,
    pub attacked: MetricReport,
    /// attacked similarity / baseline similarity
    pub protection_ratio: f64,
    /// protected prior MMD / pretrained prior MMD
    pub preservation_ratio: f64,
    pub protection_effective: bool,
    pub preservation_ok: bool,
    pub checkpoints: Vec<String>,
    pub notes: Vec<String>,
}

impl ScenarioReport {
    fn assemble(
        lab: &Lab,
        name: String,
        mode: ProtectMode,
        protected: MetricReport,
        attacked: MetricReport,
        baseline: MetricReport,
        notes: Vec<String>,
    ) -> Result<Self> {
        for (what, r) in [("protected", &protected), ("attacked", &attacked), ("baseline", &baseline)] {
            if !r.is_finite() {
                return Err(ApdmError::numeric(format!("{what} metrics are not finite")));
            }
        }
        let protection_ratio = attacked.subject_similarity / baseline.subject_similarity;
        let preservation_ratio = protected.prior_mmd / lab.pretrained_report.prior_mmd;
        Ok(ScenarioReport {
            name,
            mode,
            seed: lab.cfg.seed,
            subject: lab.cfg.data.subject,
            config_hash: lab.cfg.hash(),
            pretrained: lab.pretrained_report.clone(),
            baseline,
            protected,
            attacked,
            protection_ratio,
            preservation_ratio,
            protection_effective: protection_ratio <= PROTECTION_RATIO,
            preservation_ok: preservation_ratio <= PRESERVATION_RATIO,
            checkpoints: Vec::new(),
            notes,
        })
    }
}

/// Protected model, its attacked counterpart, and the scored report.
pub struct ScenarioOutcome {
    pub protected: ConditionalDenoiser,
    pub attacked: ConditionalDenoiser,
    pub report: ScenarioReport,
}

/// Pretrained → protect with `mode` → attacker personalizes on the clean
/// subject samples → score both models.
pub fn run_protect_attack(lab: &Lab, mode: ProtectMode, l2p: &L2PConfig) -> Result<ScenarioOutcome> {
    let (protected, _) = lab.protect(mode, l2p)?;
    let attacked = lab.attack(&protected, &lab.dataset)?;
    let report = ScenarioReport::assemble(
        lab,
        format!("protect_attack/{}", mode.label()),
        mode,
        lab.score(&protected)?,
        lab.score(&attacked)?,
        lab.baseline_report.clone(),
        Vec::new(),
    )?;
    Ok(ScenarioOutcome {
        protected,
        attacked,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Reflection of the first coordinate about the subject mean.
    Flip,
    /// Additive Gaussian jitter, the stand-in for blur.
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "arg")]
pub enum RobustnessVariant {
    UnseenData(usize),
    Transform(Transform),
    IdentifierMismatch,
    OtherSubject,
}

impl RobustnessVariant {
    pub fn label(&self) -> String {
        match self {
            RobustnessVariant::UnseenData(k) => format!("unseen_data_{k}"),
            RobustnessVariant::Transform(Transform::Flip) => "transform_flip".into(),
            RobustnessVariant::Transform(Transform::Noise) => "transform_noise".into(),
            RobustnessVariant::IdentifierMismatch => "identifier_mismatch".into(),
            RobustnessVariant::OtherSubject => "other_subject".into(),
        }
    }
}

/// Applies `transform` to attack samples of a subject centred at `center`.
pub fn transform_samples(samples: &[Sample], transform: Transform, center: &[f64], jitter_std: f64, seed: u64) -> Vec<Sample> {
    match transform {
        Transform::Flip => samples
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v[0] = 2.0 * center[0] - v[0];
                v
            })
            .collect(),
        Transform::Noise => {
            let mut rng = LabRng::seed_from_u64(seed);
            samples
                .iter()
                .map(|s| {
                    let z = Sample::standard_normal(s.len(), &mut rng);
                    Sample(s.iter().zip(z.iter()).map(|(x, e)| x + jitter_std * e).collect())
                })
                .collect()
        }
    }
}

/// Protects with L2P from `protected` (pass the output of
/// `lab.protect(L2p, ..)` to share it across variants), then attacks under
/// `variant`.
pub fn run_robustness(lab: &Lab, protected: &ConditionalDenoiser, variant: RobustnessVariant) -> Result<ScenarioOutcome> {
    let cfg = &lab.cfg;
    let subject_mean = cfg.world.subject(cfg.data.subject)?.mean.clone();
    let mut notes = Vec::new();
    let (attack_set, score_set, baseline) = match variant {
        RobustnessVariant::UnseenData(0) => (lab.dataset.clone(), lab.dataset.clone(), lab.baseline_report.clone()),
        RobustnessVariant::UnseenData(k) => {
            let mut rng = LabRng::seed_from_u64(cfg.stage_seed(&format!("unseen/{}/{k}", cfg.data.subject)));
            let fresh = cfg.world.draw_subject(cfg.data.subject, k, &mut rng)?;
            notes.push(format!("attacker used {k} subject samples not seen during protection"));
            (lab.attack_dataset(fresh), lab.dataset.clone(), lab.baseline_report.clone())
        }
        RobustnessVariant::Transform(t) => {
            let moved = transform_samples(&lab.dataset.negatives, t, &subject_mean, cfg.scenario.jitter_std, cfg.stage_seed("jitter"));
            if t == Transform::Noise {
                notes.push(format!("additive jitter std {} stands in for blur", cfg.scenario.jitter_std));
            }
            (lab.dataset.with_negatives(moved)?, lab.dataset.clone(), lab.baseline_report.clone())
        }
        RobustnessVariant::IdentifierMismatch => {
            let mut ds = lab.dataset.clone();
            ds.c_per = ConditioningEmbedding {
                vector: cfg.embedding(EmbeddingTag::Other).vector,
                tag: EmbeddingTag::Other,
            };
            let baseline_model = lab.attack(&lab.pretrained, &ds)?;
            let baseline = lab.score_on(&baseline_model, &ds)?;
            notes.push("attacker personalized under a fresh identifier".into());
            (ds.clone(), ds, baseline)
        }
        RobustnessVariant::OtherSubject => {
            let other = cfg.scenario.other_subject;
            if other == cfg.data.subject {
                return Err(ApdmError::config("scenario.other_subject must differ from data.subject"));
            }
            let mut rng = LabRng::seed_from_u64(cfg.stage_seed(&format!("world/{other}")));
            let samples = cfg.world.draw_subject(other, cfg.data.n_subject, &mut rng)?;
            let ds = lab.attack_dataset(samples);
            let baseline_model = lab.attack(&lab.pretrained, &ds)?;
            let baseline = lab.score_on(&baseline_model, &ds)?;
            notes.push(format!("personalized to subject {other}; success expected"));
            (ds.clone(), ds, baseline)
        }
    };
    let attacked = lab.attack(protected, &attack_set)?;
    let report = ScenarioReport::assemble(
        lab,
        format!("robustness/{}", variant.label()),
        ProtectMode::L2p,
        lab.score(protected)?,
        lab.score_on(&attacked, &score_set)?,
        baseline,
        notes,
    )?;
    Ok(ScenarioOutcome {
        protected: protected.clone(),
        attacked,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseCurve {
    pub lambda: f64,
    /// `(step, prior_mmd)`
    pub mmd: Vec<(usize, f64)>,
    pub diagnostics: ExperimentTrace,
    pub losses: ExperimentTrace,
}

impl CollapseCurve {
    pub fn initial(&self) -> f64 {
        self.mmd.first().map(|p| p.1).unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.mmd.last().map(|p| p.1).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub seed: u64,
    pub config_hash: String,
    pub pretrained_mmd: f64,
    pub curves: Vec<CollapseCurve>,
}

/// Descends the naive objective for `steps` steps at each λ, recording
/// prior MMD every `cfg.naive.mmd_every` steps (and at the end) and the
/// gradient diagnostics at every step.
pub fn run_naive_collapse(lab: &Lab, lambdas: &[f64], steps: usize) -> Result<CollapseReport> {
    let every = lab.cfg.naive.mmd_every.max(1);
    let mut curves = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut rng = LabRng::seed_from_u64(lab.cfg.stage_seed("protect"));
        let mut mmd = Vec::new();
        let (_, losses, diagnostics) = naive_protect(
            &lab.pretrained,
            &lab.schedule,
            &lab.dataset,
            steps,
            lab.cfg.l2p.gamma_protect,
            lambda,
            &mut rng,
            |step, model| {
                if step % every == 0 || step == steps {
                    if mmd.last().map(|p: &(usize, f64)| p.0) != Some(step) {
                        mmd.push((step, lab.prior_mmd(model)?));
                    }
                }
                Ok(())
            },
        )?;
        curves.push(CollapseCurve {
            lambda,
            mmd,
            diagnostics,
            losses,
        });
    }
    Ok(CollapseReport {
        seed: lab.cfg.seed,
        config_hash: lab.cfg.hash(),
        pretrained_mmd: lab.pretrained_report.prior_mmd,
        curves,
    })
}
