//! One function per subcommand. Stages share the random streams of the
//! scenario library, so a CLI recipe reproduces the scenario numbers.

use std::fs;
use std::path::{Path, PathBuf};

use apdm_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use apdm_core::config::ExperimentConfig;
use apdm_core::denoiser::ConditionalDenoiser;
use apdm_core::personalization::personalize;
use apdm_core::protection::{diagnose as diagnose_once, DIAGNOSTIC_COLUMNS};
use apdm_core::scenarios::{
    pretrain_for, run_naive_collapse, run_protect_attack, run_robustness, Lab, ProtectMode, RobustnessVariant,
    ScenarioReport, Transform,
};
use apdm_core::trace::{format_value, ExperimentTrace};
use apdm_core::LabRng;
use rand::SeedableRng;

use crate::report::write_report;
use crate::run_dir::{io_failure, RunDir};
use crate::{Failure, Mode, RunArgs};

pub const PRETRAINED: &str = "pretrained.ckpt";
pub const PROTECTED: &str = "protected.ckpt";
pub const ATTACKED: &str = "attacked.ckpt";
pub const SCENARIO_MATRIX: &str = "scenarios.csv";

struct Stage {
    cfg: ExperimentConfig,
    run: RunDir,
    written: Vec<String>,
}

impl Stage {
    fn open(args: &RunArgs) -> Result<Self, Failure> {
        let text = fs::read_to_string(&args.config)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
        let mut cfg = ExperimentConfig::from_toml_str(&text)?;
        if let Some(dir) = &args.output_dir {
            cfg.output_dir = dir.clone();
        }
        let run = RunDir::open(&cfg)?;
        Ok(Stage {
            cfg,
            run,
            written: Vec::new(),
        })
    }

    fn input(&self, given: Option<PathBuf>, default: &str) -> PathBuf {
        given.unwrap_or_else(|| self.run.file(default))
    }

    /// Loads a checkpoint and checks it was built for this config's arch.
    fn load(&self, path: &Path) -> Result<ConditionalDenoiser, Failure> {
        let (model, meta) = load_checkpoint(path).map_err(|e| match e {
            apdm_core::ApdmError::Io(io) => Failure::Usage(format!("cannot read checkpoint {}: {io}", path.display())),
            other => other.into(),
        })?;
        if meta.arch != self.cfg.arch() {
            return Err(Failure::Usage(format!(
                "checkpoint {} was written for a different architecture than the config describes",
                path.display()
            )));
        }
        Ok(model)
    }

    fn save(&mut self, model: &ConditionalDenoiser, name: &str, stage: &str) -> Result<(), Failure> {
        let meta = CheckpointMeta {
            arch: self.cfg.arch(),
            schedule: self.cfg.schedule.params(),
            seed: self.cfg.seed,
            stage: stage.to_string(),
        };
        save_checkpoint(model, &self.run.file(name), &meta)?;
        self.written.push(name.to_string());
        self.written.push(format!("{name}.json"));
        Ok(())
    }

    fn csv(&mut self, trace: &ExperimentTrace, name: &str) -> Result<(), Failure> {
        trace.write_csv(&self.run.file(name))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, value: &T, name: &str) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).expect("reports are always serializable");
        text.push('\n');
        fs::write(self.run.file(name), text).map_err(io_failure)?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// A lab around the pretrained checkpoint, without fixtures.
    fn lab(&self, pretrained: Option<PathBuf>) -> Result<Lab, Failure> {
        let pre = self.load(&self.input(pretrained, PRETRAINED))?;
        Ok(Lab::bare(&self.cfg, pre)?)
    }

    fn finish(self, stage: &str) -> Result<(), Failure> {
        self.run.record(stage, &self.written)?;
        for name in &self.written {
            println!("wrote {}", self.run.file(name).display());
        }
        Ok(())
    }
}

pub fn pretrain(args: &RunArgs) -> Result<(), Failure> {
    let mut st = Stage::open(args)?;
    let (model, trace) = pretrain_for(&st.cfg)?;
    st.save(&model, PRETRAINED, "pretrain")?;
    st.csv(&trace, "pretrain.csv")?;
    st.finish("pretrain")
}

pub fn personalize_stage(args: &RunArgs, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let mut st = Stage::open(args)?;
    let lab = st.lab(None)?;
    let model = st.load(&st.input(checkpoint, PRETRAINED))?;
    let mut rng = LabRng::seed_from_u64(st.cfg.stage_seed("personalize"));
    let p = &st.cfg.personalize;
    let (out, trace) = personalize(&model, &lab.schedule, &lab.dataset, p.steps, p.lr, &mut rng)?;
    st.save(&out, "personalized.ckpt", "personalize")?;
    st.csv(&trace, "personalize.csv")?;
    st.finish("personalize")
}

pub fn protect(args: &RunArgs, mode: Mode, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let mut st = Stage::open(args)?;
    let lab = st.lab(checkpoint)?;
    let mode = match mode {
        Mode::Naive => ProtectMode::Naive,
        Mode::Dpo => ProtectMode::DpoOnly,
        Mode::L2p => ProtectMode::L2p,
    };
    let (model, trace) = lab.protect(mode, &st.cfg.l2p)?;
    st.save(&model, PROTECTED, &format!("protect/{}", mode.label()))?;
    st.csv(&trace, "protect.csv")?;
    st.finish("protect")
}

pub fn attack(args: &RunArgs, checkpoint: Option<PathBuf>, pretrained: Option<PathBuf>) -> Result<(), Failure> {
    let mut st = Stage::open(args)?;
    let lab = st.lab(pretrained)?;
    let model = st.load(&st.input(checkpoint, PROTECTED))?;
    let (out, trace) = lab.attack_traced(&model, &lab.dataset)?;
    st.save(&out, ATTACKED, "attack")?;
    st.csv(&trace, "attack.csv")?;
    st.finish("attack")
}

pub fn eval(args: &RunArgs, checkpoint: Option<PathBuf>, pretrained: Option<PathBuf>) -> Result<(), Failure> {
    let mut st = Stage::open(args)?;
    let lab = st.lab(pretrained)?;
    let path = st.input(checkpoint, ATTACKED);
    let model = st.load(&path)?;
    let report = lab.score(&model)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    println!(
        "{stem}: subject_similarity {:.6} prior_mmd {:.6}",
        report.subject_similarity, report.prior_mmd
    );
    st.json(&report, &format!("eval-{stem}.json"))?;
    st.finish("eval")
}

pub fn diagnose(
    args: &RunArgs,
    checkpoint: Option<PathBuf>,
    pretrained: Option<PathBuf>,
    draws: usize,
    eta: f64,
) -> Result<(), Failure> {
    let mut st = Stage::open(args)?;
    let lab = st.lab(pretrained)?;
    let model = st.load(&st.input(checkpoint, PRETRAINED))?;
    let mut rng = LabRng::seed_from_u64(st.cfg.stage_seed("diagnose"));
    let mut trace = ExperimentTrace::new("diagnose", &DIAGNOSTIC_COLUMNS);
    let mut both_improve = 0;
    for k in 0..draws {
        let (d, _, _) = diagnose_once(&model, &lab.schedule, &lab.dataset, eta, &mut rng)?;
        both_improve += usize::from(d.both_objectives_improve());
        trace.push(d.row(k));
    }
    println!("{both_improve} of {draws} draws predict both objectives improve at eta {eta}");
    st.csv(&trace, "diagnose.csv")?;
    st.finish("diagnose")
}

fn parse_scenario(name: &str) -> Result<ScenarioKind, Failure> {
    let unknown = || {
        Failure::Usage(format!(
            "unknown scenario {name:?}; expected protect_attack/{{none,naive,dpo_only,l2p}}, naive_collapse, or \
             robustness/{{unseen_data_<k>,transform_flip,transform_noise,identifier_mismatch,other_subject}}"
        ))
    };
    if name == "naive_collapse" {
        return Ok(ScenarioKind::Collapse);
    }
    let (family, arg) = name.split_once('/').ok_or_else(unknown)?;
    match family {
        "protect_attack" => Ok(ScenarioKind::ProtectAttack(match arg {
            "none" => ProtectMode::None,
            "naive" => ProtectMode::Naive,
            "dpo_only" => ProtectMode::DpoOnly,
            "l2p" => ProtectMode::L2p,
            _ => return Err(unknown()),
        })),
        "robustness" => Ok(ScenarioKind::Robustness(match arg {
            "transform_flip" => RobustnessVariant::Transform(Transform::Flip),
            "transform_noise" => RobustnessVariant::Transform(Transform::Noise),
            "identifier_mismatch" => RobustnessVariant::IdentifierMismatch,
            "other_subject" => RobustnessVariant::OtherSubject,
            _ => {
                let k = arg.strip_prefix("unseen_data_").and_then(|k| k.parse().ok()).ok_or_else(unknown)?;
                RobustnessVariant::UnseenData(k)
            }
        })),
        _ => Err(unknown()),
    }
}

enum ScenarioKind {
    ProtectAttack(ProtectMode),
    Robustness(RobustnessVariant),
    Collapse,
}

pub fn scenario(args: &RunArgs, name: &str, pretrained: Option<PathBuf>) -> Result<(), Failure> {
    let kind = parse_scenario(name)?;
    let mut st = Stage::open(args)?;
    let pre = match pretrained {
        Some(path) => st.load(&path)?,
        None => pretrain_for(&st.cfg)?.0,
    };
    let lab = Lab::with_pretrained(&st.cfg, pre)?;
    let slug = name.replace('/', "-");
    match kind {
        ScenarioKind::Collapse => {
            let collapse = run_naive_collapse(&lab, &st.cfg.naive.lambda_sweep, st.cfg.naive.steps)?;
            let mut curves = ExperimentTrace::new("naive_collapse", &["lambda", "step", "prior_mmd"]);
            for (k, curve) in collapse.curves.iter().enumerate() {
                for &(step, mmd) in &curve.mmd {
                    curves.push(vec![curve.lambda, step as f64, mmd]);
                }
                st.csv(&curve.diagnostics, &format!("collapse-diagnostics-{k}.csv"))?;
                st.csv(&curve.losses, &format!("collapse-losses-{k}.csv"))?;
                println!(
                    "lambda {}: prior_mmd {:.6} -> {:.6} ({:.2}x the pretrained fixture)",
                    curve.lambda,
                    curve.initial(),
                    curve.last(),
                    curve.last() / collapse.pretrained_mmd
                );
            }
            st.csv(&curves, "collapse.csv")?;
            st.json(&collapse, "scenario-naive_collapse.json")?;
        }
        ScenarioKind::ProtectAttack(mode) => {
            let out = run_protect_attack(&lab, mode, &st.cfg.l2p)?;
            scenario_outputs(&mut st, &slug, out.protected, out.attacked, out.report)?;
        }
        ScenarioKind::Robustness(variant) => {
            let (protected, _) = lab.protect(ProtectMode::L2p, &st.cfg.l2p)?;
            let out = run_robustness(&lab, &protected, variant)?;
            scenario_outputs(&mut st, &slug, out.protected, out.attacked, out.report)?;
        }
    }
    st.finish("scenario")
}

fn scenario_outputs(
    st: &mut Stage,
    slug: &str,
    protected: ConditionalDenoiser,
    attacked: ConditionalDenoiser,
    mut report: ScenarioReport,
) -> Result<(), Failure> {
    for (model, role) in [(&protected, "protected"), (&attacked, "attacked")] {
        let name = format!("scenario-{slug}-{role}.ckpt");
        st.save(model, &name, &format!("scenario/{role}"))?;
        report.checkpoints.push(st.run.file(&name).display().to_string());
    }
    println!(
        "{}: attacked/baseline similarity {:.3} (effective: {}), protected/pretrained prior MMD {:.3} (ok: {})",
        report.name, report.protection_ratio, report.protection_effective, report.preservation_ratio, report.preservation_ok
    );
    st.json(&report, &format!("scenario-{slug}.json"))?;
    append_matrix(st, &report)
}

/// Appends one row per scenario run to the aggregate matrix.
fn append_matrix(st: &mut Stage, r: &ScenarioReport) -> Result<(), Failure> {
    let path = st.run.file(SCENARIO_MATRIX);
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_failure)?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Failure::Domain(format!("csv error: {e}"));
    if fresh {
        w.write_record([
            "scenario",
            "mode",
            "seed",
            "subject",
            "config_hash",
            "baseline_similarity",
            "attacked_similarity",
            "pretrained_prior_mmd",
            "protected_prior_mmd",
            "protection_ratio",
            "preservation_ratio",
            "protection_effective",
            "preservation_ok",
        ])
        .map_err(csv_err)?;
    }
    let nums = [
        r.baseline.subject_similarity,
        r.attacked.subject_similarity,
        r.pretrained.prior_mmd,
        r.protected.prior_mmd,
        r.protection_ratio,
        r.preservation_ratio,
    ];
    let mut row = vec![r.name.clone(), r.mode.label().into(), r.seed.to_string(), r.subject.to_string(), r.config_hash.clone()];
    row.extend(nums.iter().map(|v| format_value(*v)));
    row.push(r.protection_effective.to_string());
    row.push(r.preservation_ok.to_string());
    w.write_record(&row).map_err(csv_err)?;
    w.flush().map_err(io_failure)?;
    if !st.written.iter().any(|n| n == SCENARIO_MATRIX) {
        st.written.push(SCENARIO_MATRIX.to_string());
    }
    Ok(())
}

pub fn report(args: &RunArgs) -> Result<(), Failure> {
    let mut st = Stage::open(args)?;
    let (written, table) = write_report(&st.run.path)?;
    print!("{table}");
    st.written.extend(written);
    st.finish("report")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_names() {
        assert!(matches!(parse_scenario("naive_collapse"), Ok(ScenarioKind::Collapse)));
        assert!(matches!(
            parse_scenario("protect_attack/dpo_only"),
            Ok(ScenarioKind::ProtectAttack(ProtectMode::DpoOnly))
        ));
        assert!(matches!(
            parse_scenario("robustness/unseen_data_8"),
            Ok(ScenarioKind::Robustness(RobustnessVariant::UnseenData(8)))
        ));
        for bad in ["", "l2p", "protect_attack/x", "robustness/unseen_data_", "robustness/unseen_data_-1", "other/none"] {
            assert!(matches!(parse_scenario(bad), Err(Failure::Usage(_))), "{bad}");
        }
    }
}
