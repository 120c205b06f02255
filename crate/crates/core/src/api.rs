//! Request and response bodies of the HTTP service.
//!
//! Shared by the server and the client so both sides agree on one schema.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backends::{Dataset, LedgerSummary};
use crate::distillation::{Checkpoint, DistillationPlan, DistillationReport};
use crate::error::{ErrorKind, ShuntError};
use crate::harness::{ExperimentConfig, ObjectiveSpec, RecordFormat, SplitName, SyntheticTaskSpec};
use crate::metrics::EvaluationReport;
use crate::prob::{ClassId, ProbabilityVector};
use crate::prompting::{ProficiencyRule, Template};
use crate::router::RoutingOutcome;

pub const HEALTH: &str = "/health";
pub const CLASSIFY: &str = "/v1/classify";
pub const INGEST: &str = "/v1/ingest";
pub const SYNTH: &str = "/v1/synth";
pub const CALIBRATE: &str = "/v1/calibrate";
pub const PARTITION: &str = "/v1/partition";
pub const DISTILL: &str = "/v1/distill";
pub const ROUTE: &str = "/v1/route";
pub const REPORT: &str = "/v1/report";
pub const RUN: &str = "/v1/run";
pub const PROMPT: &str = "/v1/prompt";

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

impl From<&ShuntError> for ErrorBody {
    fn from(e: &ShuntError) -> Self {
        Self {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub format: RecordFormat,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub task: SyntheticTaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResponse {
    pub samples: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateRequest {
    pub config: ExperimentConfig,
    pub grid: String,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default)]
    pub split: Option<SplitName>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRequest {
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRequest {
    pub plan: DistillationPlan,
    #[serde(default)]
    pub epochs: Option<usize>,
    /// `large:self` mini-batch ratio.
    #[serde(default)]
    pub ratio: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillResponse {
    pub report: DistillationReport,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRequest {
    pub config: ExperimentConfig,
    pub input: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub delta: f64,
    pub outcomes: Vec<RoutingOutcome>,
    pub ledgers: BTreeMap<String, LedgerSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub outcomes: Vec<RoutingOutcome>,
    pub gold: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub config: ExperimentConfig,
    /// Parent of the new `run-NNNN` directory, on the server's filesystem.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub run_dir: PathBuf,
    pub delta: Option<f64>,
    pub report: Option<EvaluationReport>,
    pub ledgers: BTreeMap<String, LedgerSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    Soft,
    Hard,
}

/// Builds one pruned prompt from a small-model distribution.
///
/// Proficient classes are taken from `proficient` when given, otherwise
/// derived from `accuracies` with `rule`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub mode: PruneMode,
    pub template: Template,
    #[serde(default)]
    pub annotation: Option<Template>,
    pub small_probs: ProbabilityVector,
    #[serde(default)]
    pub candidates: Option<Vec<ClassId>>,
    #[serde(default)]
    pub proficient: Option<Vec<ClassId>>,
    #[serde(default)]
    pub accuracies: BTreeMap<ClassId, f64>,
    #[serde(default)]
    pub rule: ProficiencyRule,
}
