use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ingest::RecordFormat;
use super::synthetic::SyntheticTaskSpec;
use crate::backends::{ConfidenceDist, CostProfile, RemoteConfig};
use crate::distillation::KlDirection;
use crate::error::{Result, ShuntError};
use crate::prob::ClassId;
use crate::prompting::{ProficiencyRule, Template};
use crate::router::{ConfidenceReduction, ShuntStrategy};

pub const SEED_ENV: &str = "SHUNTGATE_SEED";

/// Full description of one experiment. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "one")]
    pub workers: usize,
    /// Explicit candidate classes; otherwise taken from the data.
    #[serde(default)]
    pub classes: Option<Vec<ClassId>>,
    pub data: DataSpec,
    #[serde(default)]
    pub small: SmallSpec,
    pub large: LargeSpec,
    pub policy: PolicySpec,
    #[serde(default)]
    pub calibration: Option<CalibrationSpec>,
    #[serde(default)]
    pub prompting: PromptingSpec,
    #[serde(default)]
    pub distillation: Option<DistillationSpec>,
    #[serde(default)]
    pub report: ReportSpec,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Files {
        train: PathBuf,
        #[serde(default)]
        validation: Option<PathBuf>,
        test: PathBuf,
        #[serde(default)]
        format: Option<RecordFormat>,
    },
    /// One generated dataset cut into train / validation / test by fraction.
    Synthetic {
        task: SyntheticTaskSpec,
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

/// The specific small model: a linear-softmax classifier trained on the
/// train split or loaded from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallSpec {
    #[serde(default = "small_name")]
    pub name: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "small_epochs")]
    pub epochs: usize,
    #[serde(default = "small_lr")]
    pub learning_rate: f64,
    #[serde(default = "small_batch")]
    pub batch_size: usize,
}

fn small_name() -> String {
    "specific-small".into()
}
fn small_epochs() -> usize {
    30
}
fn small_lr() -> f64 {
    0.5
}
fn small_batch() -> usize {
    32
}

impl Default for SmallSpec {
    fn default() -> Self {
        Self {
            name: small_name(),
            checkpoint: None,
            epochs: small_epochs(),
            learning_rate: small_lr(),
            batch_size: small_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LargeSpec {
    /// Seeded from the experiment seed.
    Simulated {
        #[serde(default = "large_name")]
        name: String,
        accuracy: f64,
        #[serde(default)]
        per_class_accuracy: BTreeMap<ClassId, f64>,
        #[serde(default)]
        confidence_when_correct: Option<ConfidenceDist>,
        #[serde(default)]
        confidence_when_wrong: Option<ConfidenceDist>,
        #[serde(default)]
        cost: CostProfile,
    },
    Remote {
        remote: RemoteConfig,
        #[serde(default)]
        cost: CostProfile,
    },
}

fn large_name() -> String {
    "simulated-large".into()
}

impl LargeSpec {
    pub fn name(&self) -> &str {
        match self {
            LargeSpec::Simulated { name, .. } => name,
            LargeSpec::Remote { remote, .. } => &remote.name,
        }
    }

    pub fn cost(&self) -> CostProfile {
        match self {
            LargeSpec::Simulated { cost, .. } | LargeSpec::Remote { cost, .. } => *cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub delta: f64,
    #[serde(default)]
    pub strategy: ShuntStrategy,
    #[serde(default)]
    pub reduction: ConfidenceReduction,
    /// Regions kept small by the distribution-model strategy.
    #[serde(default = "head_only")]
    pub small_regions: Vec<String>,
    #[serde(default = "aux_epochs")]
    pub aux_epochs: usize,
}

fn head_only() -> Vec<String> {
    vec!["head".into()]
}

fn aux_epochs() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSpec {
    MatchLarge,
    MaxAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    pub grid: String,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default = "validation_split")]
    pub split: SplitName,
}

fn validation_split() -> SplitName {
    SplitName::Validation
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptModeSpec {
    #[default]
    Direct,
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptingSpec {
    #[serde(default)]
    pub mode: PromptModeSpec,
    #[serde(default = "default_base")]
    pub template: Template,
    #[serde(default)]
    pub annotation: Option<Template>,
    #[serde(default)]
    pub proficiency: ProficiencyRule,
}

fn default_base() -> Template {
    Template::parse("Classify the input. Options: {candidates}.").expect("valid default template")
}

impl Default for PromptingSpec {
    fn default() -> Self {
        Self {
            mode: PromptModeSpec::Direct,
            template: default_base(),
            annotation: None,
            proficiency: ProficiencyRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "distill_epochs")]
    pub epochs: usize,
    #[serde(default = "small_batch")]
    pub batch_size: usize,
    /// `large:self` mini-batch ratio.
    #[serde(default = "default_ratio")]
    pub ratio: String,
    #[serde(default)]
    pub direction: KlDirection,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "yes")]
    pub early_stop: bool,
}

impl Default for DistillationSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: distill_epochs(),
            batch_size: small_batch(),
            ratio: default_ratio(),
            direction: KlDirection::default(),
            learning_rate: None,
            early_stop: true,
        }
    }
}

fn distill_epochs() -> usize {
    20
}

fn default_ratio() -> String {
    "1:1".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSpec {
    /// Also score small-only and large-only baselines on the test split.
    #[serde(default = "yes")]
    pub baselines: bool,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self { baselines: true }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ShuntError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ShuntError::config(e.to_string()))
    }

    /// Reads, applies the seed override from the environment, and validates.
    /// Relative data paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(seed) = seed_from_env()? {
            cfg.seed = seed;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSpec::Files {
            train,
            validation,
            test,
            ..
        } = &mut self.data
        {
            fix(train);
            fix(test);
            if let Some(v) = validation {
                fix(v);
            }
        }
        if let Some(c) = &mut self.small.checkpoint {
            fix(c);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.policy.delta > 0.0 && self.policy.delta < 1.0) {
            return Err(ShuntError::config(format!("delta {} outside (0,1)", self.policy.delta)));
        }
        if self.workers == 0 {
            return Err(ShuntError::config("workers must be at least 1"));
        }
        let mut names = vec![self.small.name.as_str(), self.large.name()];
        if self.distillation.as_ref().is_some_and(|d| d.enabled) {
            names.push(super::run::LEARNABLE_NAME);
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(ShuntError::config(format!("backend ids must be unique, got {names:?}")));
        }
        self.large.cost().validate()?;
        match &self.data {
            DataSpec::Files {
                train,
                validation,
                test,
                ..
            } => {
                for p in [Some(train), validation.as_ref(), Some(test)].into_iter().flatten() {
                    if !p.is_file() {
                        return Err(ShuntError::config(format!("data file {} does not exist", p.display())));
                    }
                }
            }
            DataSpec::Synthetic { task, split } => {
                task.validate()?;
                if split.iter().any(|f| !(*f >= 0.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(ShuntError::config("split fractions must be non-negative and sum to 1"));
                }
            }
        }
        if let Some(c) = &self.small.checkpoint {
            if !c.is_file() {
                return Err(ShuntError::config(format!("checkpoint {} does not exist", c.display())));
            }
        }
        if let Some(c) = &self.calibration {
            c.grid.parse::<crate::router::DeltaGrid>()?;
        }
        if let Some(d) = &self.distillation {
            crate::distillation::DistillSchedule::parse_ratio(&d.ratio)?;
        }
        Ok(())
    }
}

/// `SHUNTGATE_SEED`, when set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ShuntError::config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(ShuntError::config(format!("{SEED_ENV}: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3

        [data]
        source = "synthetic"
        [data.task]
        n_classes = 6
        n_samples = 600
        separation = 4.0
        skew = [10.0, 3.0, 1.0]
        seed = 3

        [large]
        kind = "simulated"
        accuracy = 0.9
        cost = { price_per_input_token = 1.0 }

        [policy]
        delta = 0.9
    "#;

    #[test]
    fn minimal_config_parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.small, SmallSpec::default());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("delta = 0.9", "delta = 0.9\ndetla = 0.8");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("accuracy = 0.9", "accuracy = 0.9\nacuracy = 1");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn missing_seed_rejected() {
        assert!(ExperimentConfig::from_toml(&MINIMAL.replace("seed = 3\n\n", "")).is_err());
    }

    #[test]
    fn duplicate_backend_ids_rejected() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.small.name = "simulated-large".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_files_rejected() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.data = DataSpec::Files {
            train: "/nonexistent/train.jsonl".into(),
            validation: None,
            test: "/nonexistent/test.jsonl".into(),
            format: None,
        };
        assert!(cfg.validate().is_err());
    }
}
