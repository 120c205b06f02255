use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::config::{CalibrationSpec, DataSpec, ExperimentConfig, LargeSpec, ObjectiveSpec, PromptModeSpec, SplitName};
use super::ingest::{ingest, RecordFormat};
use super::synthetic::{generate_synthetic, largest_remainder};
use crate::backends::{
    classify, CostLedger, Dataset, LedgerSummary, Metered, ModelBackend, RemoteBackend, SimulatedOracle,
    SimulatedOracleConfig,
};
use crate::distillation::{
    distill, partition, Checkpoint, DistillSchedule, DistillationPlan, DistillationReport, LinearSoftmaxClassifier,
};
use crate::error::{Result, ShuntError};
use crate::metrics::{evaluate, Baselines, EvaluationReport};
use crate::prob::ClassId;
use crate::prompting::{per_class_accuracy, ProficiencySet, PromptBuilder, Template, DEFAULT_ANNOTATION};
use crate::router::{
    calibrate_delta, CalibrationObjective, CalibrationResult, Cascade, DeltaGrid, DistributionModel, LargeRequest,
    PredictionModel, RoutingOutcome, ShuntPolicy, ShuntStrategy,
};
use crate::seed::derive_seed;

pub const LEARNABLE_NAME: &str = "learnable-small";

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
}

pub fn load_splits(data: &DataSpec) -> Result<Splits> {
    match data {
        DataSpec::Files {
            train,
            validation,
            test,
            format,
        } => {
            let read = |p: &Path| {
                let f = match format {
                    Some(f) => *f,
                    None => RecordFormat::from_path(p)?,
                };
                ingest(p, f)
            };
            Ok(Splits {
                train: read(train)?,
                validation: validation.as_deref().map(read).transpose()?,
                test: read(test)?,
            })
        }
        DataSpec::Synthetic { task, split } => {
            let all = generate_synthetic(task)?;
            let sizes = largest_remainder(all.len(), split);
            let samples = all.samples();
            let (a, rest) = samples.split_at(sizes[0]);
            let (b, c) = rest.split_at(sizes[1]);
            Ok(Splits {
                train: Dataset::new(a.to_vec())?,
                validation: (!b.is_empty()).then(|| Dataset::new(b.to_vec())).transpose()?,
                test: Dataset::new(c.to_vec())?,
            })
        }
    }
}

/// Everything a run produced. Fields stay `None` for stages that did not run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub config_toml: String,
    pub seed: u64,
    pub classes: Vec<ClassId>,
    pub delta: Option<f64>,
    pub specific_checkpoint: Option<Checkpoint>,
    pub calibration: Option<CalibrationResult>,
    pub plan: Option<DistillationPlan>,
    pub distillation: Option<DistillationReport>,
    pub learnable_checkpoint: Option<Checkpoint>,
    pub outcomes: Vec<RoutingOutcome>,
    pub report: Option<EvaluationReport>,
    /// Large-model spend per phase.
    pub ledgers: BTreeMap<String, LedgerSummary>,
}

/// Small summary written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub classes: Vec<ClassId>,
    pub delta: Option<f64>,
    pub ledgers: BTreeMap<String, LedgerSummary>,
}

impl RunArtifacts {
    pub fn outcomes_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for o in &self.outcomes {
            out += &serde_json::to_string(o)?;
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes every artifact present into `dir` and marks the files read-only.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        let mut files: Vec<(&str, String)> = vec![("config.toml", self.config_toml.clone())];
        files.push((
            "run.json",
            serde_json::to_string_pretty(&RunSummary {
                seed: self.seed,
                classes: self.classes.clone(),
                delta: self.delta,
                ledgers: self.ledgers.clone(),
            })?,
        ));
        if let Some(c) = &self.specific_checkpoint {
            files.push(("specific.ckpt.json", pretty(c)?));
        }
        if let Some(c) = &self.calibration {
            files.push(("calibration.json", pretty(c)?));
        }
        if let Some(p) = &self.plan {
            files.push(("plan.json", pretty(p)?));
        }
        if let Some(r) = &self.distillation {
            files.push(("distillation.json", pretty(r)?));
        }
        if let Some(c) = &self.learnable_checkpoint {
            files.push(("learnable.ckpt.json", pretty(c)?));
        }
        if !self.outcomes.is_empty() {
            files.push(("outcomes.jsonl", self.outcomes_jsonl()?));
        }
        if let Some(r) = &self.report {
            files.push(("report.jsonl", r.to_jsonl()?));
            files.push(("report.txt", r.to_table()));
        }
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            let mut perms = std::fs::metadata(&path)?.permissions();
            perms.set_readonly(true);
            std::fs::set_permissions(&path, perms)?;
        }
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Creates a fresh `run-NNNN` directory under `root`; existing runs are never reused.
pub fn create_run_dir(root: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    for n in 1..=9999u32 {
        let dir = root.join(format!("run-{n:04}"));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(ShuntError::config(format!(
        "no free run directory under {}",
        root.display()
    )))
}

pub fn build_large(spec: &LargeSpec, seed: u64) -> Result<Arc<dyn ModelBackend>> {
    match spec {
        LargeSpec::Simulated {
            name,
            accuracy,
            per_class_accuracy,
            confidence_when_correct,
            confidence_when_wrong,
            ..
        } => {
            let base = SimulatedOracleConfig::with_accuracy(*accuracy, derive_seed(seed, "large"));
            let config = SimulatedOracleConfig {
                name: name.clone(),
                per_class_accuracy: per_class_accuracy.clone(),
                confidence_when_correct: confidence_when_correct.unwrap_or(base.confidence_when_correct),
                confidence_when_wrong: confidence_when_wrong.unwrap_or(base.confidence_when_wrong),
                ..base
            };
            Ok(Arc::new(SimulatedOracle::new(config)?))
        }
        LargeSpec::Remote { remote, .. } => Ok(Arc::new(RemoteBackend::new(remote.clone())?)),
    }
}

fn metered(inner: &Arc<dyn ModelBackend>, spec: &LargeSpec) -> (Arc<dyn ModelBackend>, Arc<CostLedger>) {
    let ledger = CostLedger::new();
    (
        Arc::new(Metered::new(inner.clone(), spec.cost(), ledger.clone())),
        ledger,
    )
}

fn feature_dim(data: &Dataset) -> Result<usize> {
    data.samples()
        .first()
        .and_then(|s| s.payload.as_features())
        .map(<[f64]>::len)
        .ok_or_else(|| ShuntError::domain("the linear small model needs feature payloads"))
}

/// Runs every configured stage, filling `art` as it goes so a failure still
/// leaves the finished stages' artifacts behind.
pub fn run_experiment_into(cfg: &ExperimentConfig, art: &mut RunArtifacts) -> Result<()> {
    run_stages(cfg, art, None, Stop::End)
}

/// Trains (or loads) the small model, calibrates and distills as configured,
/// then routes `input` instead of the test split. Baselines are skipped.
pub fn route_input(cfg: &ExperimentConfig, input: &Dataset) -> Result<RunArtifacts> {
    let mut cfg = cfg.clone();
    cfg.report.baselines = false;
    let mut art = RunArtifacts::default();
    run_stages(&cfg, &mut art, Some(input), Stop::End)?;
    Ok(art)
}

/// Runs the config up to and including calibration, with `spec` replacing
/// the config's calibration section.
pub fn calibrate_experiment(cfg: &ExperimentConfig, spec: CalibrationSpec) -> Result<CalibrationResult> {
    let mut cfg = cfg.clone();
    cfg.calibration = Some(spec);
    let mut art = RunArtifacts::default();
    run_stages(&cfg, &mut art, None, Stop::Calibration)?;
    Ok(art.calibration.expect("calibration ran"))
}

/// Runs the config up to the partition step and returns the frozen plan.
/// Distillation settings default when the config has none.
pub fn plan_experiment(cfg: &ExperimentConfig) -> Result<DistillationPlan> {
    let mut cfg = cfg.clone();
    let mut spec = cfg.distillation.take().unwrap_or_default();
    spec.enabled = true;
    cfg.distillation = Some(spec);
    let mut art = RunArtifacts::default();
    run_stages(&cfg, &mut art, None, Stop::Partition)?;
    Ok(art.plan.expect("partition ran"))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stop {
    Calibration,
    Partition,
    End,
}

fn run_stages(cfg: &ExperimentConfig, art: &mut RunArtifacts, input: Option<&Dataset>, stop: Stop) -> Result<()> {
    cfg.validate()?;
    art.config_toml = cfg.to_toml()?;
    art.seed = cfg.seed;
    let seed = cfg.seed;

    let splits = load_splits(&cfg.data).map_err(|e| e.in_stage("data"))?;
    let classes = match &cfg.classes {
        Some(c) => c.clone(),
        None => {
            let mut set: BTreeSet<ClassId> = splits.train.label_set().into_iter().collect();
            set.extend(splits.test.label_set());
            if let Some(v) = &splits.validation {
                set.extend(v.label_set());
            }
            set.into_iter().collect()
        }
    };
    if classes.is_empty() {
        return Err(ShuntError::config("no classes configured or found in the data").in_stage("data"));
    }
    art.classes = classes.clone();

    let specific = (|| -> Result<LinearSoftmaxClassifier> {
        if let Some(path) = &cfg.small.checkpoint {
            let m = LinearSoftmaxClassifier::load(path)?;
            if m.classes() != classes.as_slice() {
                return Err(ShuntError::config("checkpoint classes differ from the experiment's"));
            }
            return Ok(m);
        }
        let mut m = LinearSoftmaxClassifier::new(
            classes.clone(),
            feature_dim(&splits.train)?,
            cfg.small.learning_rate,
            derive_seed(seed, "specific"),
        )?
        .with_name(cfg.small.name.clone());
        m.fit(&splits.train, cfg.small.epochs, cfg.small.batch_size)?;
        Ok(m)
    })()
    .map_err(|e| e.in_stage("small"))?;
    art.specific_checkpoint = Some(Checkpoint::from(&specific));
    let specific: Arc<LinearSoftmaxClassifier> = Arc::new(specific);
    let specific_dyn: Arc<dyn ModelBackend> = specific.clone();

    let large = build_large(&cfg.large, seed).map_err(|e| e.in_stage("large"))?;
    let tuning = splits.validation.as_ref().unwrap_or(&splits.train);

    let mut delta = cfg.policy.delta;
    if let Some(cal) = &cfg.calibration {
        let (large_cal, ledger) = metered(&large, &cfg.large);
        let result = calibrate(cal, &splits, specific.as_ref(), large_cal.as_ref(), &classes)
            .map_err(|e| e.in_stage("calibrate"))?;
        if !result.met {
            warn!(
                chosen = result.chosen_delta,
                "no grid delta met the calibration objective"
            );
        }
        delta = result.chosen_delta;
        art.calibration = Some(result);
        art.ledgers.insert("calibration".into(), ledger.summary());
    }
    art.delta = Some(delta);
    if stop == Stop::Calibration {
        return Ok(());
    }

    let mut learnable: Option<Arc<dyn ModelBackend>> = None;
    if let Some(d) = cfg.distillation.as_ref().filter(|d| d.enabled) {
        let (large_batches, self_batches) = DistillSchedule::parse_ratio(&d.ratio)?;
        let schedule = DistillSchedule {
            epochs: d.epochs,
            batch_size: d.batch_size,
            large_batches,
            self_batches,
            direction: d.direction,
            learning_rate: d.learning_rate,
            early_stop: d.early_stop,
        };
        let (large_train, ledger) = metered(&large, &cfg.large);
        let mut plan = partition(
            &splits.train,
            specific.as_ref(),
            large_train.as_ref(),
            &classes,
            delta,
            schedule,
            derive_seed(seed, "distill"),
        )
        .map_err(|e| e.in_stage("partition"))?;
        art.ledgers.insert("distillation".into(), ledger.summary());
        plan.specific_checkpoint = art.specific_checkpoint.clone();
        if stop == Stop::Partition {
            art.plan = Some(plan);
            return Ok(());
        }
        let mut student = specific.as_ref().clone().with_name(LEARNABLE_NAME);
        let report = distill(&plan, &mut student);
        art.plan = Some(plan);
        let report = report.map_err(|e| e.in_stage("distill"))?;
        info!(epochs = report.epochs_run, forgetting = ?report.forgetting_delta, "distillation finished");
        art.distillation = Some(report);
        art.learnable_checkpoint = Some(Checkpoint::from(&student));
        learnable = Some(Arc::new(student));
    }

    let (large_inf, inference_ledger) = metered(&large, &cfg.large);
    let policy = ShuntPolicy {
        delta,
        strategy: cfg.policy.strategy,
        reduction: cfg.policy.reduction,
    };
    let mut cascade = Cascade::new(specific_dyn.clone(), large_inf, classes.clone(), policy)?;
    if let Some(l) = learnable {
        cascade = cascade.with_learnable(l);
    }
    match cfg.policy.strategy {
        ShuntStrategy::Confidence => {}
        ShuntStrategy::DistributionModel => {
            let regions = cfg.policy.small_regions.iter().cloned().collect();
            let m = DistributionModel::train(
                &splits.train,
                regions,
                cfg.policy.aux_epochs,
                0.5,
                derive_seed(seed, "aux"),
            )
            .map_err(|e| e.in_stage("aux-model"))?;
            cascade = cascade.with_distribution_model(m);
        }
        ShuntStrategy::PredictionModel => {
            let m = PredictionModel::train(
                tuning,
                specific.as_ref(),
                &classes,
                cfg.policy.aux_epochs,
                0.5,
                derive_seed(seed, "aux"),
            )
            .map_err(|e| e.in_stage("aux-model"))?;
            cascade = cascade.with_prediction_model(m);
        }
    }
    if cfg.prompting.mode != PromptModeSpec::Direct {
        let accuracies = per_class_accuracy(tuning, specific.as_ref(), &classes, Some(delta))
            .map_err(|e| e.in_stage("prompting"))?;
        let proficient = ProficiencySet::from_accuracies(&accuracies, cfg.prompting.proficiency);
        let annotation = match &cfg.prompting.annotation {
            Some(t) => t.clone(),
            None => Template::parse(DEFAULT_ANNOTATION)?,
        };
        let builder = PromptBuilder::with_annotation(cfg.prompting.template.clone(), annotation)?;
        cascade = cascade.with_large_request(match cfg.prompting.mode {
            PromptModeSpec::Soft => LargeRequest::SoftPrune { builder, proficient },
            _ => LargeRequest::HardPrune { builder, proficient },
        });
    }

    let test = input.unwrap_or(&splits.test);
    art.outcomes = cascade
        .route_dataset(test, cfg.workers)
        .map_err(|e| e.in_stage("route"))?;
    art.ledgers.insert("inference".into(), inference_ledger.summary());

    let mut report = evaluate(&art.outcomes, test).map_err(|e| e.in_stage("evaluate"))?;
    if cfg.report.baselines {
        let (large_base, ledger) = metered(&large, &cfg.large);
        let baselines =
            baselines(test, specific.as_ref(), large_base.as_ref(), &classes).map_err(|e| e.in_stage("baselines"))?;
        art.ledgers.insert("baseline".into(), ledger.summary());
        report = report.with_baselines(Baselines {
            large_only_cost: Some(ledger.summary().total_micros),
            ..baselines
        });
    }
    art.report = Some(report);
    Ok(())
}

fn calibrate(
    cal: &CalibrationSpec,
    splits: &Splits,
    specific: &dyn ModelBackend,
    large: &dyn ModelBackend,
    classes: &[ClassId],
) -> Result<CalibrationResult> {
    let data = match (cal.split, &splits.validation) {
        (SplitName::Validation, Some(v)) => v,
        (SplitName::Validation, None) => {
            warn!("no validation split; calibrating on train");
            &splits.train
        }
        (SplitName::Train, _) => &splits.train,
    };
    let grid: DeltaGrid = cal.grid.parse()?;
    let objective = match cal.objective {
        ObjectiveSpec::MatchLarge => CalibrationObjective::MatchLargeAccuracy { target: cal.target },
        ObjectiveSpec::MaxAccuracy => CalibrationObjective::MaxAccuracy,
    };
    calibrate_delta(data, specific, large, classes, &grid, objective)
}

fn baselines(
    test: &Dataset,
    specific: &LinearSoftmaxClassifier,
    large: &dyn ModelBackend,
    classes: &[ClassId],
) -> Result<Baselines> {
    let mut hit = 0usize;
    let mut n = 0usize;
    for s in test {
        let pred = classify(large, s, classes, None)?;
        if let Some(g) = &s.gold_label {
            n += 1;
            hit += usize::from(pred.probs.top_class() == g);
        }
    }
    Ok(Baselines {
        small_only_accuracy: specific.accuracy(test)?,
        large_only_accuracy: (n > 0).then(|| hit as f64 / n as f64),
        large_only_cost: None,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let mut art = RunArtifacts::default();
    run_experiment_into(cfg, &mut art)?;
    Ok(art)
}

/// Runs into a new directory under `root`. Partial artifacts are persisted on failure.
pub fn execute_run(cfg: &ExperimentConfig, root: &Path) -> Result<(PathBuf, RunArtifacts)> {
    let dir = create_run_dir(root)?;
    let mut art = RunArtifacts::default();
    let result = run_experiment_into(cfg, &mut art);
    art.persist(&dir)?;
    if let Err(e) = &result {
        std::fs::write(dir.join("error.txt"), format!("{e}\n"))?;
    }
    result.map(|()| (dir, art))
}
