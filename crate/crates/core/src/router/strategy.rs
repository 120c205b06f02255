use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::{classify, Dataset, ModelBackend, Sample};
use crate::distillation::LinearSoftmaxClassifier;
use crate::error::{Result, ShuntError};
use crate::prob::{entropy, ClassId, ProbabilityVector};

pub const CORRECT: &str = "correct";
pub const WRONG: &str = "wrong";

/// What decides whether a small tier keeps a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuntStrategy {
    /// Reduced confidence strictly above δ.
    #[default]
    Confidence,
    /// Auxiliary classifier predicts the sample's data region; some regions stay small.
    DistributionModel,
    /// Auxiliary classifier predicts whether the small answer is right.
    PredictionModel,
}

/// Collapses a distribution to one confidence score in [0, 1].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceReduction {
    #[default]
    Max,
    /// Top-1 minus top-2 probability.
    Margin,
    /// 1 − H(p) / log N.
    Entropy,
}

impl ConfidenceReduction {
    pub fn reduce(self, p: &ProbabilityVector) -> f64 {
        match self {
            ConfidenceReduction::Max => p.max_prob(),
            ConfidenceReduction::Margin => p.margin(),
            ConfidenceReduction::Entropy => {
                if p.len() < 2 {
                    1.0
                } else {
                    (1.0 - entropy(p) / (p.len() as f64).ln()).clamp(0.0, 1.0)
                }
            }
        }
    }
}

fn features(sample: &Sample) -> Result<&[f64]> {
    sample
        .payload
        .as_features()
        .ok_or_else(|| ShuntError::domain(format!("sample `{}` has no feature payload", sample.id)))
}

/// Region classifier: samples predicted to fall in `small_regions` stay small.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionModel {
    pub classifier: LinearSoftmaxClassifier,
    pub small_regions: BTreeSet<String>,
}

impl DistributionModel {
    /// Fits a region classifier on each sample's category tag.
    pub fn train(
        data: &Dataset,
        small_regions: BTreeSet<String>,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let relabeled: Vec<Sample> = data
            .iter()
            .filter_map(|s| {
                let region = s.category.clone()?;
                let mut s = s.clone();
                s.gold_label = Some(region);
                Some(s)
            })
            .collect();
        let relabeled = Dataset::new(relabeled)?;
        let regions = relabeled.label_set();
        if regions.is_empty() {
            return Err(ShuntError::domain("no category tags to train a distribution model on"));
        }
        let dim = features(&relabeled.samples()[0])?.len();
        let mut classifier =
            LinearSoftmaxClassifier::new(regions, dim, learning_rate, seed)?.with_name("distribution-model");
        classifier.fit(&relabeled, epochs, 32)?;
        Ok(Self {
            classifier,
            small_regions,
        })
    }

    pub fn region(&self, sample: &Sample) -> Result<&ClassId> {
        self.classifier.predict(features(sample)?)
    }

    pub fn keeps_small(&self, sample: &Sample) -> Result<bool> {
        Ok(self.small_regions.contains(self.region(sample)?))
    }
}

/// Correctness predictor over the sample features plus the small model's top probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionModel {
    pub classifier: LinearSoftmaxClassifier,
}

impl PredictionModel {
    pub fn from_classifier(classifier: LinearSoftmaxClassifier) -> Result<Self> {
        let c = classifier.classes();
        if c.len() != 2 || !c.iter().any(|x| x == CORRECT) || !c.iter().any(|x| x == WRONG) {
            return Err(ShuntError::config(format!(
                "prediction model classes must be `{CORRECT}` and `{WRONG}`"
            )));
        }
        Ok(Self { classifier })
    }

    fn input(sample: &Sample, probs: &ProbabilityVector) -> Result<Vec<f64>> {
        let mut x = features(sample)?.to_vec();
        x.push(probs.max_prob());
        Ok(x)
    }

    /// Labels each sample by whether `small` gets it right, then fits.
    pub fn train(
        data: &Dataset,
        small: &dyn ModelBackend,
        candidates: &[ClassId],
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for s in data {
            let Some(gold) = &s.gold_label else { continue };
            let probs = classify(small, s, candidates, None)?.probs;
            let label = if probs.top_class() == gold { CORRECT } else { WRONG };
            rows.push(Sample::features(s.id.clone(), Self::input(s, &probs)?).with_gold(label));
        }
        let rows = Dataset::new(rows)?;
        let dim = rows
            .samples()
            .first()
            .ok_or_else(|| ShuntError::domain("no labelled samples to train a prediction model on"))?
            .payload
            .as_features()
            .map_or(0, <[f64]>::len);
        let mut classifier =
            LinearSoftmaxClassifier::new(vec![CORRECT.into(), WRONG.into()], dim, learning_rate, seed)?
                .with_name("prediction-model");
        classifier.fit(&rows, epochs, 32)?;
        Ok(Self { classifier })
    }

    pub fn predicts_correct(&self, sample: &Sample, probs: &ProbabilityVector) -> Result<bool> {
        Ok(self.classifier.predict(&Self::input(sample, probs)?)? == CORRECT)
    }
}
