//! Ready-made tasks used by the acceptance suite, the service and the CLI.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::backends::{
    ConfidenceDist, Dataset, ModelBackend, Sample, ScriptedGenerator, SimulatedOracle, SimulatedOracleConfig,
};
use crate::distillation::{
    distill, partition, DistillSchedule, DistillationPlan, DistillationReport, LinearSoftmaxClassifier,
};
use crate::error::{Result, ShuntError};
use crate::prob::ClassId;
use crate::prompting::{Pipeline, PipelineDef};
use crate::seed::{derive_seed, rng_for};

const DOMINANCE_TOML: &str = include_str!("../../fixtures/dominance.toml");
const PT_NARRATIVE: &str = include_str!("../../fixtures/pt_dispute/narrative.txt");
const PT_SUMMARY: &str = include_str!("../../fixtures/pt_dispute/summary.txt");
const PT_PIPELINE: &str = include_str!("../../fixtures/pt_dispute/pipeline.toml");

/// Head-skewed synthetic task with a 90%-accurate simulated large model
/// billed at 1.0 per input token.
pub fn dominance_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(DOMINANCE_TOML).expect("bundled dominance config parses");
    cfg.seed = seed;
    if let super::config::DataSpec::Synthetic { task, .. } = &mut cfg.data {
        task.seed = seed;
    }
    cfg
}

/// Raw text of the bundled dominance config.
pub fn dominance_toml() -> &'static str {
    DOMINANCE_TOML
}

/// A long dispute narrative and its hand-written summary, chained as
/// summarize (small) then judge (large).
#[derive(Debug, Clone)]
pub struct PtFixture {
    pub narrative: String,
    pub summary: String,
    pub def: PipelineDef,
    pub candidates: Vec<ClassId>,
}

pub fn pt_fixture() -> Result<PtFixture> {
    let def: PipelineDef = toml::from_str(PT_PIPELINE).map_err(|e| ShuntError::config(e.to_string()))?;
    Ok(PtFixture {
        narrative: PT_NARRATIVE.trim().to_string(),
        summary: PT_SUMMARY.trim().to_string(),
        def,
        candidates: vec!["tenant".into(), "landlord".into()],
    })
}

impl PtFixture {
    pub fn sample(&self) -> Sample {
        Sample::text("dispute-1", self.narrative.clone()).with_gold("tenant")
    }

    /// Builds the pipeline with a scripted summarizer and the given large model.
    pub fn pipeline(&self, large: Arc<dyn ModelBackend>) -> Result<Pipeline> {
        let summarizer = ScriptedGenerator::new("summarizer").respond(self.narrative.clone(), self.summary.clone());
        let backends: BTreeMap<String, Arc<dyn ModelBackend>> = BTreeMap::from([
            ("summarizer".to_string(), Arc::new(summarizer) as Arc<dyn ModelBackend>),
            ("large".to_string(), large),
        ]);
        self.def.build(&backends, &self.candidates)
    }
}

/// Two clusters living in disjoint feature blocks. The specific model is
/// trained on cluster A only; cluster B is what the large model teaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoClusterSpec {
    pub classes_per_cluster: usize,
    pub features_per_cluster: usize,
    pub separation: f64,
    pub noise_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub oracle_accuracy: f64,
    pub delta: f64,
    pub specific_epochs: usize,
    pub distill_epochs: usize,
    pub seed: u64,
}

impl Default for TwoClusterSpec {
    fn default() -> Self {
        Self {
            classes_per_cluster: 4,
            features_per_cluster: 6,
            separation: 4.0,
            noise_std: 1.0,
            train_per_class: 150,
            test_per_class: 500,
            oracle_accuracy: 0.95,
            delta: 0.9,
            specific_epochs: 30,
            distill_epochs: 40,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoClusterTask {
    pub spec: TwoClusterSpec,
    pub classes: Vec<ClassId>,
    pub specific: LinearSoftmaxClassifier,
    pub train: Dataset,
    pub test_a: Dataset,
    pub test_b: Dataset,
    pub oracle: SimulatedOracleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoClusterResult {
    pub ratio: (usize, usize),
    pub a_before: f64,
    pub a_after: f64,
    pub b_before: f64,
    pub b_after: f64,
    pub large_queries: usize,
    pub report: DistillationReport,
}

impl TwoClusterResult {
    /// Cluster-A accuracy lost, in points.
    pub fn forgetting(&self) -> f64 {
        (self.a_before - self.a_after) * 100.0
    }

    /// Cluster-B accuracy gained, in points.
    pub fn gain(&self) -> f64 {
        (self.b_after - self.b_before) * 100.0
    }
}

pub fn build_two_cluster(spec: &TwoClusterSpec) -> Result<TwoClusterTask> {
    let k = spec.classes_per_cluster;
    let f = spec.features_per_cluster;
    if k < 2 || f == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(ShuntError::domain(
            "two-cluster task needs ≥2 classes per cluster and samples",
        ));
    }
    let classes: Vec<ClassId> = (0..2 * k).map(|c| format!("c{c}")).collect();
    let dim = 2 * f;
    let mut mean_rng = rng_for(spec.seed, "two-cluster/means");
    let means: Vec<Vec<f64>> = (0..2 * k)
        .map(|c| {
            let block = if c < k { 0 } else { f };
            let dir: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let mut m = vec![0.0; dim];
            for (i, d) in dir.iter().enumerate() {
                m[block + i] = d / norm * spec.separation;
            }
            m
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| ShuntError::domain(e.to_string()))?;
    let mut rng = rng_for(spec.seed, "two-cluster/samples");
    let mut draw = |prefix: &str, per_class: usize, range: std::ops::Range<usize>| -> Result<Dataset> {
        let mut out = Vec::new();
        for c in range {
            for i in 0..per_class {
                let x = means[c].iter().map(|m| m + noise.sample(&mut rng)).collect();
                let cluster = if c < k { "A" } else { "B" };
                out.push(
                    Sample::features(format!("{prefix}-c{c}-{i:04}"), x)
                        .with_gold(classes[c].clone())
                        .with_category(cluster),
                );
            }
        }
        Dataset::new(out)
    };
    let specific_train = draw("a", spec.train_per_class, 0..k)?;
    let mixed = draw("t", spec.train_per_class, 0..2 * k)?;
    let test_a = draw("xa", spec.test_per_class, 0..k)?;
    let test_b = draw("xb", spec.test_per_class, k..2 * k)?;

    let mut specific = LinearSoftmaxClassifier::new(classes.clone(), dim, 0.5, derive_seed(spec.seed, "specific"))?
        .with_name("specific-small");
    specific.fit(&specific_train, spec.specific_epochs, 32)?;

    let oracle = SimulatedOracleConfig {
        name: "simulated-large".into(),
        default_accuracy: spec.oracle_accuracy,
        per_class_accuracy: BTreeMap::new(),
        confidence_when_correct: ConfidenceDist::Uniform { low: 0.95, high: 0.999 },
        confidence_when_wrong: ConfidenceDist::Uniform { low: 0.5, high: 0.95 },
        seed: derive_seed(spec.seed, "large"),
        classes: Some(classes.clone()),
    };
    Ok(TwoClusterTask {
        spec: spec.clone(),
        classes,
        specific,
        train: mixed,
        test_a,
        test_b,
        oracle,
    })
}

impl TwoClusterTask {
    /// Default schedule with the task's epoch count and a `large:self` ratio.
    pub fn schedule(&self, large_batches: usize, self_batches: usize) -> DistillSchedule {
        DistillSchedule {
            epochs: self.spec.distill_epochs,
            large_batches,
            self_batches,
            ..DistillSchedule::default()
        }
    }

    pub fn plan(&self, schedule: DistillSchedule) -> Result<DistillationPlan> {
        let large = SimulatedOracle::new(self.oracle.clone())?;
        let mut plan = partition(
            &self.train,
            &self.specific,
            &large,
            &self.classes,
            self.spec.delta,
            schedule,
            derive_seed(self.spec.seed, "distill"),
        )?;
        plan.specific_checkpoint = Some((&self.specific).into());
        Ok(plan)
    }

    /// Distills a fresh copy of the specific model with the given schedule.
    pub fn run(&self, schedule: DistillSchedule) -> Result<TwoClusterResult> {
        let plan = self.plan(schedule)?;
        let mut learnable = self.specific.clone().with_name("learnable-small");
        let acc = |m: &LinearSoftmaxClassifier, d: &Dataset| -> Result<f64> {
            Ok(m.accuracy(d)?.expect("test sets are labelled"))
        };
        let a_before = acc(&learnable, &self.test_a)?;
        let b_before = acc(&learnable, &self.test_b)?;
        let report = distill(&plan, &mut learnable)?;
        Ok(TwoClusterResult {
            ratio: (schedule.large_batches, schedule.self_batches),
            a_before,
            a_after: acc(&learnable, &self.test_a)?,
            b_before,
            b_after: acc(&learnable, &self.test_b)?,
            large_queries: plan.large_queries(),
            report,
        })
    }
}
