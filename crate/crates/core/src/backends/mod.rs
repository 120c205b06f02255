//! Model backends: the small and large models the cascade talks to.
//!
//! A backend only has to answer [`ModelBackend::classify`]; generation is an
//! optional capability used by prompt-transfer pipelines. Costs are charged
//! by wrapping a backend in [`Metered`], which is how the large tier is
//! normally deployed.

mod cost;
mod remote;
mod simulated;
mod tokenize;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cost::{CostLedger, CostProfile, LedgerEntry, LedgerSummary, Metered, TokenUsage};
pub use remote::{call_remote, RemoteBackend, RemoteConfig, WireRequest, WireResponse};
pub use simulated::{ConfidenceDist, SimulatedOracle, SimulatedOracleConfig};
pub use tokenize::{Tokenizer, WhitespaceTokenizer, WordPunctTokenizer};

use crate::error::{Result, ShuntError};
use crate::prob::{ClassId, ProbabilityVector};

/// Input to a model: free text or a dense feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Text(String),
    Features(Vec<f64>),
}

impl Payload {
    pub fn is_empty(&self) -> bool {
        match self {
            Payload::Text(t) => t.trim().is_empty(),
            Payload::Features(f) => f.is_empty(),
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Payload::Text(t) => Some(t),
            Payload::Features(_) => None,
        }
    }

    pub fn as_features(&self) -> Option<&[f64]> {
        match self {
            Payload::Features(f) => Some(f),
            Payload::Text(_) => None,
        }
    }

    /// Text form used on the wire; features become space-separated numbers.
    pub fn to_wire_string(&self) -> String {
        match self {
            Payload::Text(t) => t.clone(),
            Payload::Features(f) => f.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub payload: Payload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl Sample {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            payload: Payload::Text(text.into()),
            gold_label: None,
            category: None,
        }
    }

    pub fn features(id: impl Into<String>, features: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            payload: Payload::Features(features),
            gold_label: None,
            category: None,
        }
    }

    pub fn with_gold(mut self, label: impl Into<ClassId>) -> Self {
        self.gold_label = Some(label.into());
        self
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(ShuntError::domain("sample id is empty"));
        }
        if self.payload.is_empty() {
            return Err(ShuntError::domain(format!("sample `{}` has an empty payload", self.id)));
        }
        if let Payload::Features(f) = &self.payload {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(ShuntError::domain(format!(
                    "sample `{}` has a non-finite feature",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// An ordered collection of samples with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Sample>", into = "Vec<Sample>")]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl TryFrom<Vec<Sample>> for Dataset {
    type Error = ShuntError;

    fn try_from(samples: Vec<Sample>) -> Result<Self> {
        Dataset::new(samples)
    }
}

impl From<Dataset> for Vec<Sample> {
    fn from(d: Dataset) -> Self {
        d.samples
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(ShuntError::domain(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    pub fn by_id(&self) -> BTreeMap<&str, &Sample> {
        self.samples.iter().map(|s| (s.id.as_str(), s)).collect()
    }

    /// Sorted, de-duplicated gold labels.
    pub fn label_set(&self) -> Vec<ClassId> {
        let set: std::collections::BTreeSet<&ClassId> =
            self.samples.iter().filter_map(|s| s.gold_label.as_ref()).collect();
        set.into_iter().cloned().collect()
    }

    /// Keeps the samples matching `keep`, preserving order.
    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Sample;
    type IntoIter = std::slice::Iter<'a, Sample>;

    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyRequest<'a> {
    pub sample: &'a Sample,
    pub candidates: &'a [ClassId],
    /// Rendered prompt, when the caller built one (large tier only).
    pub prompt: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: ProbabilityVector,
    pub usage: TokenUsage,
    /// Set by [`Metered`]; zero for unmetered backends.
    pub cost_micros: u64,
}

impl Prediction {
    pub fn free(probs: ProbabilityVector) -> Self {
        Self {
            probs,
            usage: TokenUsage::default(),
            cost_micros: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub usage: TokenUsage,
    pub cost_micros: u64,
}

pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Prediction>;

    fn generate(&self, _prompt: &str) -> Result<Generation> {
        Err(ShuntError::config(format!(
            "backend `{}` does not support generation",
            self.name()
        )))
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Prediction> {
        (**self).classify(request)
    }

    fn generate(&self, prompt: &str) -> Result<Generation> {
        (**self).generate(prompt)
    }
}

/// Classifies `sample` over exactly `candidates` and checks the result's shape.
pub fn classify(
    backend: &dyn ModelBackend,
    sample: &Sample,
    candidates: &[ClassId],
    prompt: Option<&str>,
) -> Result<Prediction> {
    if candidates.is_empty() {
        return Err(ShuntError::domain("classify called with no candidates"));
    }
    let prediction = backend.classify(&ClassifyRequest {
        sample,
        candidates,
        prompt,
    })?;
    if prediction.probs.class_ids() != candidates {
        return Err(ShuntError::protocol(format!(
            "backend `{}` answered over {:?}, expected {:?}",
            backend.name(),
            prediction.probs.class_ids(),
            candidates
        )));
    }
    Ok(prediction)
}

/// Mean probability the model assigned to the token it actually emitted.
pub fn aggregate_sequence_confidence(token_probs: &[ProbabilityVector], chosen: &[ClassId]) -> Result<f64> {
    if token_probs.is_empty() {
        return Err(ShuntError::domain("empty generated sequence"));
    }
    if token_probs.len() != chosen.len() {
        return Err(ShuntError::domain(format!(
            "{} step distributions for {} chosen tokens",
            token_probs.len(),
            chosen.len()
        )));
    }
    let mut total = 0.0;
    for (step, (dist, token)) in token_probs.iter().zip(chosen).enumerate() {
        total += dist
            .get(token)
            .ok_or_else(|| ShuntError::domain(format!("token `{token}` missing from step {step} distribution")))?;
    }
    Ok(total / token_probs.len() as f64)
}

/// Backend answering from a fixed table of per-sample distributions.
///
/// Stands in for cached large-model answers and for hand-specified small
/// models in tests.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CachedBackend {
    pub name: String,
    pub answers: BTreeMap<String, ProbabilityVector>,
}

impl CachedBackend {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            answers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, probs: ProbabilityVector) {
        self.answers.insert(sample_id.into(), probs);
    }
}

impl ModelBackend for CachedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Prediction> {
        let stored = self.answers.get(&request.sample.id).ok_or_else(|| {
            ShuntError::domain(format!(
                "backend `{}` has no answer for sample `{}`",
                self.name, request.sample.id
            ))
        })?;
        Ok(Prediction::free(stored.restrict(request.candidates)?))
    }
}

/// Text generator that replays canned outputs keyed by exact input text.
///
/// Used as the small summarization model in transfer pipelines.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedGenerator {
    pub name: String,
    pub responses: BTreeMap<String, String>,
}

impl ScriptedGenerator {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            responses: BTreeMap::new(),
        }
    }

    pub fn respond(mut self, input: impl Into<String>, output: impl Into<String>) -> Self {
        self.responses.insert(input.into().trim().to_string(), output.into());
        self
    }
}

impl ModelBackend for ScriptedGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, _request: &ClassifyRequest<'_>) -> Result<Prediction> {
        Err(ShuntError::config(format!(
            "backend `{}` only generates text",
            self.name
        )))
    }

    fn generate(&self, prompt: &str) -> Result<Generation> {
        let text = self
            .responses
            .get(prompt.trim())
            .ok_or_else(|| ShuntError::domain(format!("generator `{}` has no script for this input", self.name)))?;
        Ok(Generation {
            text: text.clone(),
            usage: TokenUsage {
                input_tokens: WhitespaceTokenizer.count(prompt) as u64,
                output_tokens: WhitespaceTokenizer.count(text) as u64,
            },
            cost_micros: 0,
        })
    }
}
