//! Two-stage confidence distillation.
//!
//! A frozen "specific" small model and a large model label the training set.
//! Samples the specific model is sure about (x1) are distilled from the
//! specific model itself; samples it is unsure about but the large model is
//! sure about (x3) are distilled from the large model. Alternating the two
//! losses lets the learnable copy pick up new classes without drifting away
//! from what it already knew.

mod checkpoint;
mod classifier;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::debug;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use classifier::{KlDirection, LinearSoftmaxClassifier, ParamGradient};

use crate::backends::{classify, Dataset, ModelBackend, Sample};
use crate::error::{Result, ShuntError};
use crate::prob::{ClassId, ProbabilityVector};
use crate::seed::rng_for;

/// Relative change in epoch loss below which training counts as plateaued.
pub const PLATEAU_TOLERANCE: f64 = 1e-4;
/// Consecutive plateaued epochs before stopping early.
pub const PLATEAU_PATIENCE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub sample: Sample,
    pub teacher: ProbabilityVector,
}

/// How the two losses are interleaved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Mini-batches from x3 (large teacher) per round.
    pub large_batches: usize,
    /// Mini-batches from x1 (specific-small teacher) per round.
    pub self_batches: usize,
    #[serde(default)]
    pub direction: KlDirection,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_true")]
    pub early_stop: bool,
}

fn default_true() -> bool {
    true
}

impl Default for DistillSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            large_batches: 1,
            self_batches: 1,
            direction: KlDirection::StudentFirst,
            learning_rate: None,
            early_stop: true,
        }
    }
}

impl DistillSchedule {
    /// Parses an `a:b` alternation ratio.
    pub fn parse_ratio(text: &str) -> Result<(usize, usize)> {
        let (a, b) = text
            .split_once(':')
            .ok_or_else(|| ShuntError::config(format!("ratio `{text}` is not of the form a:b")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| ShuntError::config(format!("ratio `{text}` is not of the form a:b")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a == 0 && b == 0 {
            return Err(ShuntError::config("ratio 0:0 trains nothing"));
        }
        Ok((a, b))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ShuntError::config("batch_size must be positive"));
        }
        if self.large_batches == 0 && self.self_batches == 0 {
            return Err(ShuntError::config("ratio 0:0 trains nothing"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(ShuntError::config("learning_rate must be positive"));
            }
        }
        Ok(())
    }
}

/// Frozen partition of a training set with cached teacher distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationPlan {
    pub delta: f64,
    pub classes: Vec<ClassId>,
    /// C_s1 > δ, teacher = specific small model.
    pub x1: Vec<PlanEntry>,
    /// Ids with C_s1 ≤ δ; the only samples the large model was asked about.
    pub x2: Vec<String>,
    /// Subset of x2 with C_l > δ, teacher = large model.
    pub x3: Vec<PlanEntry>,
    pub schedule: DistillSchedule,
    pub seed: u64,
    /// Parameters the learnable copy starts from, when the specific model is linear.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specific_checkpoint: Option<Checkpoint>,
}

impl DistillationPlan {
    pub fn large_queries(&self) -> usize {
        self.x2.len()
    }

    pub fn easy_slice(&self) -> Result<Dataset> {
        Dataset::new(self.x1.iter().map(|e| e.sample.clone()).collect())
    }

    pub fn hard_slice(&self) -> Result<Dataset> {
        Dataset::new(self.x3.iter().map(|e| e.sample.clone()).collect())
    }
}

/// Splits `dataset` into x1 / x2 / x3.
///
/// The large model is queried only for x2. A confidence exactly equal to δ
/// counts as not confident, matching the router's boundary rule.
pub fn partition(
    dataset: &Dataset,
    specific: &dyn ModelBackend,
    large: &dyn ModelBackend,
    classes: &[ClassId],
    delta: f64,
    schedule: DistillSchedule,
    seed: u64,
) -> Result<DistillationPlan> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ShuntError::config(format!("delta {delta} outside (0,1)")));
    }
    schedule.validate()?;
    let mut x1 = Vec::new();
    let mut x2 = Vec::new();
    let mut x3 = Vec::new();
    for sample in dataset {
        let small = classify(specific, sample, classes, None)?.probs;
        if small.max_prob() > delta {
            x1.push(PlanEntry {
                sample: sample.clone(),
                teacher: small,
            });
            continue;
        }
        x2.push(sample.id.clone());
        let teacher = classify(large, sample, classes, None)?.probs;
        if teacher.max_prob() > delta {
            x3.push(PlanEntry {
                sample: sample.clone(),
                teacher,
            });
        }
    }
    if x1.is_empty() && x3.is_empty() {
        return Err(ShuntError::Infeasible(format!(
            "no sample has a confident teacher at delta {delta}"
        )));
    }
    debug!(x1 = x1.len(), x2 = x2.len(), x3 = x3.len(), "partitioned training set");
    Ok(DistillationPlan {
        delta,
        classes: classes.to_vec(),
        x1,
        x2,
        x3,
        schedule,
        seed,
        specific_checkpoint: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationReport {
    /// Mean L_ls of each x3 mini-batch, in training order.
    pub loss_ls_curve: Vec<f64>,
    /// Mean L_s1s2 of each x1 mini-batch, in training order.
    pub loss_s1s2_curve: Vec<f64>,
    pub epoch_loss_ls: Vec<f64>,
    pub epoch_loss_s1s2: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_on_plateau: bool,
    /// Pairs skipped because their KL was infinite.
    pub skipped_pairs: usize,
    pub easy_accuracy_before: Option<f64>,
    pub easy_accuracy_after: Option<f64>,
    pub hard_accuracy_before: Option<f64>,
    pub hard_accuracy_after: Option<f64>,
    /// Easy-slice accuracy lost, in percentage points.
    pub forgetting_delta: Option<f64>,
}

struct Rows<'a> {
    xs: Vec<&'a [f64]>,
    teachers: Vec<&'a [f64]>,
}

fn rows<'a>(entries: &'a [PlanEntry], classes: &[ClassId]) -> Result<Rows<'a>> {
    let mut xs = Vec::with_capacity(entries.len());
    let mut teachers = Vec::with_capacity(entries.len());
    for e in entries {
        if e.teacher.class_ids() != classes {
            return Err(ShuntError::domain(format!(
                "teacher for `{}` is not over the student's classes",
                e.sample.id
            )));
        }
        xs.push(
            e.sample
                .payload
                .as_features()
                .ok_or_else(|| ShuntError::domain(format!("sample `{}` has no feature payload", e.sample.id)))?,
        );
        teachers.push(e.teacher.probs());
    }
    Ok(Rows { xs, teachers })
}

/// Trains `learnable` on the plan by alternating L_ls and L_s1s2 mini-batches.
pub fn distill(plan: &DistillationPlan, learnable: &mut LinearSoftmaxClassifier) -> Result<DistillationReport> {
    let schedule = plan.schedule;
    schedule.validate()?;
    if learnable.classes() != plan.classes.as_slice() {
        return Err(ShuntError::domain("learnable model classes differ from the plan's"));
    }
    if plan.x1.is_empty() && plan.x3.is_empty() {
        return Err(ShuntError::Infeasible("plan has neither x1 nor x3 samples".into()));
    }
    if let Some(lr) = schedule.learning_rate {
        learnable.set_learning_rate(lr);
    }
    let hard = rows(&plan.x3, &plan.classes)?;
    let easy = rows(&plan.x1, &plan.classes)?;
    let easy_slice = plan.easy_slice()?;
    let hard_slice = plan.hard_slice()?;

    let mut report = DistillationReport {
        loss_ls_curve: Vec::new(),
        loss_s1s2_curve: Vec::new(),
        epoch_loss_ls: Vec::new(),
        epoch_loss_s1s2: Vec::new(),
        epochs_run: 0,
        stopped_on_plateau: false,
        skipped_pairs: 0,
        easy_accuracy_before: learnable.accuracy(&easy_slice)?,
        easy_accuracy_after: None,
        hard_accuracy_before: learnable.accuracy(&hard_slice)?,
        hard_accuracy_after: None,
        forgetting_delta: None,
    };

    let use_hard = schedule.large_batches > 0 && !hard.xs.is_empty();
    let use_easy = schedule.self_batches > 0 && !easy.xs.is_empty();
    let mut rng = rng_for(plan.seed, "distill/shuffle");
    let mut hard_order: Vec<usize> = (0..hard.xs.len()).collect();
    let mut easy_order: Vec<usize> = (0..easy.xs.len()).collect();
    let mut previous_total: Option<f64> = None;
    let mut flat_epochs = 0usize;

    for epoch in 0..schedule.epochs {
        let checkpoint = learnable.clone();
        hard_order.shuffle(&mut rng);
        easy_order.shuffle(&mut rng);
        let mut hard_batches = hard_order.chunks(schedule.batch_size).peekable();
        let mut easy_batches = easy_order.chunks(schedule.batch_size).peekable();
        let (mut ls_sum, mut ls_n, mut ss_sum, mut ss_n) = (0.0, 0usize, 0.0, 0usize);

        loop {
            let mut progressed = false;
            if use_hard {
                for _ in 0..schedule.large_batches {
                    let Some(idx) = hard_batches.next() else { break };
                    let batch: Vec<_> = idx.iter().map(|&i| (hard.xs[i], hard.teachers[i])).collect();
                    let (loss, used) = learnable.step(&batch, schedule.direction);
                    report.skipped_pairs += batch.len() - used;
                    if used > 0 {
                        report.loss_ls_curve.push(loss);
                        ls_sum += loss * used as f64;
                        ls_n += used;
                    }
                    progressed = true;
                }
            }
            if use_easy {
                for _ in 0..schedule.self_batches {
                    let Some(idx) = easy_batches.next() else { break };
                    let batch: Vec<_> = idx.iter().map(|&i| (easy.xs[i], easy.teachers[i])).collect();
                    let (loss, used) = learnable.step(&batch, schedule.direction);
                    report.skipped_pairs += batch.len() - used;
                    if used > 0 {
                        report.loss_s1s2_curve.push(loss);
                        ss_sum += loss * used as f64;
                        ss_n += used;
                    }
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }

        let ls = if ls_n > 0 { ls_sum / ls_n as f64 } else { 0.0 };
        let ss = if ss_n > 0 { ss_sum / ss_n as f64 } else { 0.0 };
        if !ls.is_finite() || !ss.is_finite() || !learnable.is_finite() {
            return Err(ShuntError::Training {
                message: format!("loss diverged in epoch {epoch}"),
                last_good: Some(Box::new(checkpoint)),
            });
        }
        if use_hard {
            report.epoch_loss_ls.push(ls);
        }
        if use_easy {
            report.epoch_loss_s1s2.push(ss);
        }
        report.epochs_run = epoch + 1;

        let total = ls + ss;
        if let Some(prev) = previous_total {
            let rel = (prev - total).abs() / prev.abs().max(f64::MIN_POSITIVE);
            flat_epochs = if rel < PLATEAU_TOLERANCE { flat_epochs + 1 } else { 0 };
        }
        previous_total = Some(total);
        if schedule.early_stop && flat_epochs >= PLATEAU_PATIENCE {
            report.stopped_on_plateau = true;
            break;
        }
    }

    report.easy_accuracy_after = learnable.accuracy(&easy_slice)?;
    report.hard_accuracy_after = learnable.accuracy(&hard_slice)?;
    report.forgetting_delta = match (report.easy_accuracy_before, report.easy_accuracy_after) {
        (Some(b), Some(a)) => Some((b - a) * 100.0),
        _ => None,
    };
    Ok(report)
}

/// Accuracy lost on `easy_slice` going from `before` to `after`, in points.
pub fn forgetting_audit(
    before: &LinearSoftmaxClassifier,
    after: &LinearSoftmaxClassifier,
    easy_slice: &Dataset,
) -> Result<f64> {
    if easy_slice.is_empty() {
        return Err(ShuntError::domain("forgetting audit over an empty slice"));
    }
    if !before.same_architecture(after) {
        return Err(ShuntError::domain("forgetting audit across different architectures"));
    }
    let b = before
        .accuracy(easy_slice)?
        .ok_or_else(|| ShuntError::domain("easy slice has no gold labels"))?;
    let a = after.accuracy(easy_slice)?.unwrap_or(0.0);
    Ok((b - a) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CachedBackend, CostLedger, CostProfile, Metered};
    use crate::prob::indexed_classes;
    use std::sync::Arc;

    fn confident_model(k: usize) -> LinearSoftmaxClassifier {
        // class i fires on feature i with a large margin
        let mut m = LinearSoftmaxClassifier::zeros(indexed_classes(k), k, 0.1, 0).unwrap();
        for i in 0..k {
            m.weights[i * k + i] = 10.0;
        }
        m
    }

    fn one_hot_sample(id: usize, k: usize, hot: usize, scale: f64) -> Sample {
        let mut x = vec![0.0; k];
        x[hot] = scale;
        Sample::features(format!("s{id}"), x).with_gold(format!("c{hot}"))
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(DistillSchedule::parse_ratio("2:1").unwrap(), (2, 1));
        assert_eq!(DistillSchedule::parse_ratio(" 1 : 0 ").unwrap(), (1, 0));
        assert!(DistillSchedule::parse_ratio("0:0").is_err());
        assert!(DistillSchedule::parse_ratio("3").is_err());
        assert!(DistillSchedule::parse_ratio("a:b").is_err());
    }

    #[test]
    fn all_confident_gives_self_distillation_only() {
        let k = 3;
        let model = confident_model(k);
        let data = Dataset::new((0..30).map(|i| one_hot_sample(i, k, i % k, 1.0)).collect()).unwrap();
        let ledger = CostLedger::new();
        let large = Metered::new(
            Arc::new(CachedBackend::new("never")),
            CostProfile::per_input_token(1.0),
            ledger.clone(),
        );
        let plan = partition(
            &data,
            &model,
            &large,
            &indexed_classes(k),
            0.97,
            DistillSchedule::default(),
            1,
        )
        .unwrap();
        assert_eq!(plan.x1.len(), 30);
        assert!(plan.x2.is_empty() && plan.x3.is_empty());
        assert_eq!(ledger.summary().calls, 0);
    }

    #[test]
    fn large_model_queried_exactly_for_x2() {
        let k = 3;
        let model = confident_model(k);
        // weak samples (scale 0.1) are unsure for the small model
        let samples: Vec<Sample> = (0..40)
            .map(|i| one_hot_sample(i, k, i % k, if i % 4 == 0 { 0.1 } else { 1.0 }))
            .collect();
        let data = Dataset::new(samples.clone()).unwrap();
        let mut cache = CachedBackend::new("large");
        for (i, s) in samples.iter().enumerate() {
            let conf = if i % 8 == 0 { 0.99 } else { 0.6 };
            let gold = i % k;
            let w: Vec<f64> = (0..k)
                .map(|j| if j == gold { conf } else { (1.0 - conf) / 2.0 })
                .collect();
            cache.insert(s.id.clone(), ProbabilityVector::new(w, indexed_classes(k)).unwrap());
        }
        let ledger = CostLedger::new();
        let large = Metered::new(Arc::new(cache), CostProfile::per_input_token(1.0), ledger.clone());
        let plan = partition(
            &data,
            &model,
            &large,
            &indexed_classes(k),
            0.97,
            DistillSchedule::default(),
            1,
        )
        .unwrap();
        assert_eq!(plan.x1.len() + plan.x2.len(), data.len());
        assert_eq!(ledger.summary().calls as usize, plan.x2.len());
        assert_eq!(plan.x2.len(), 10);
        assert_eq!(plan.x3.len(), 5);
        for e in &plan.x3 {
            assert!(plan.x2.contains(&e.sample.id));
        }
    }

    #[test]
    fn infeasible_when_no_confident_teacher() {
        let model = LinearSoftmaxClassifier::zeros(indexed_classes(2), 1, 0.1, 0).unwrap();
        let data = Dataset::new(vec![Sample::features("a", vec![1.0])]).unwrap();
        let mut cache = CachedBackend::new("large");
        cache.insert("a", ProbabilityVector::uniform(indexed_classes(2)).unwrap());
        let err = partition(
            &data,
            &model,
            &cache,
            &indexed_classes(2),
            0.9,
            DistillSchedule::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ShuntError::Infeasible(_)));
    }

    #[test]
    fn self_distillation_preserves_predictions() {
        let k = 3;
        let specific = confident_model(k);
        let data = Dataset::new((0..60).map(|i| one_hot_sample(i, k, i % k, 1.0)).collect()).unwrap();
        let plan = partition(
            &data,
            &specific,
            &CachedBackend::new("unused"),
            &indexed_classes(k),
            0.97,
            DistillSchedule {
                epochs: 5,
                ..DistillSchedule::default()
            },
            2,
        )
        .unwrap();
        let mut learnable = specific.clone();
        let report = distill(&plan, &mut learnable).unwrap();
        assert!(report.loss_ls_curve.is_empty());
        for s in &data {
            let x = s.payload.as_features().unwrap();
            assert_eq!(learnable.predict(x).unwrap(), specific.predict(x).unwrap());
        }
        assert_eq!(forgetting_audit(&specific, &learnable, &data).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_audit_errors() {
        let a = confident_model(2);
        let b = confident_model(3);
        let data = Dataset::new(vec![one_hot_sample(0, 2, 0, 1.0)]).unwrap();
        assert!(forgetting_audit(&a, &a, &Dataset::default()).is_err());
        assert!(forgetting_audit(&a, &b, &data).is_err());
        assert_eq!(forgetting_audit(&a, &a, &data).unwrap(), 0.0);
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let k = 2;
        let specific = confident_model(k);
        let data = Dataset::new((0..8).map(|i| one_hot_sample(i, k, i % k, 1e150)).collect()).unwrap();
        let plan = partition(
            &data,
            &specific,
            &CachedBackend::new("unused"),
            &indexed_classes(k),
            0.5,
            DistillSchedule::default(),
            0,
        )
        .unwrap();
        let mut learnable = specific.clone();
        learnable.set_learning_rate(1e200);
        // flip teachers so gradients are non-zero
        let mut plan = plan;
        plan.schedule.direction = KlDirection::TeacherFirst;
        for e in &mut plan.x1 {
            e.teacher = ProbabilityVector::new(vec![0.5, 0.5], indexed_classes(k)).unwrap();
        }
        match distill(&plan, &mut learnable) {
            Err(ShuntError::Training { last_good: Some(m), .. }) => assert!(m.is_finite()),
            other => panic!("expected training error, got {other:?}"),
        }
    }
}
