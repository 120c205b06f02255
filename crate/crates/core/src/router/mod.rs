//! Inference-time shunting across the specific-small, learnable-small and
//! large tiers, plus threshold calibration.

mod calibrate;
mod strategy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::warn;

pub use calibrate::{
    calibrate_delta, large_only_accuracy, CalibrationObjective, CalibrationResult, DeltaGrid, SweepPoint,
};
pub use strategy::{ConfidenceReduction, DistributionModel, PredictionModel, ShuntStrategy, CORRECT, WRONG};

use crate::backends::{classify, Dataset, ModelBackend, Sample};
use crate::error::{Result, ShuntError};
use crate::prob::{ClassId, ProbabilityVector};
use crate::prompting::{Pipeline, PipelineResult, ProficiencySet, PromptBuilder, PromptRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    SpecificSmall,
    LearnableSmall,
    Large,
}

impl Tier {
    pub const ORDER: [Tier; 3] = [Tier::SpecificSmall, Tier::LearnableSmall, Tier::Large];

    pub fn is_small(self) -> bool {
        self != Tier::Large
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShuntPolicy {
    /// A small tier keeps a sample only when its confidence is strictly above this.
    pub delta: f64,
    #[serde(default)]
    pub strategy: ShuntStrategy,
    #[serde(default)]
    pub reduction: ConfidenceReduction,
}

impl ShuntPolicy {
    pub fn new(delta: f64) -> Result<Self> {
        let p = Self {
            delta,
            strategy: ShuntStrategy::Confidence,
            reduction: ConfidenceReduction::Max,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ShuntError::config(format!("delta {} outside (0,1)", self.delta)));
        }
        Ok(())
    }

    pub fn tier_order(&self) -> [Tier; 3] {
        Tier::ORDER
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub sample_id: String,
    pub tier: Tier,
    pub prediction: ClassId,
    pub confidence: f64,
    /// Micro-currency units billed for this sample.
    pub cost: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_used: Option<PromptRecord>,
    /// Served by a small tier because the large tier failed.
    #[serde(default)]
    pub degraded: bool,
}

/// How the large tier is asked.
#[derive(Debug, Clone, Default)]
pub enum LargeRequest {
    #[default]
    Direct,
    SoftPrune {
        builder: PromptBuilder,
        proficient: ProficiencySet,
    },
    HardPrune {
        builder: PromptBuilder,
        proficient: ProficiencySet,
    },
    /// The pipeline's final stage calls the large model.
    Transfer(Pipeline),
}

/// The three-tier cascade. The learnable tier is optional.
#[derive(Clone)]
pub struct Cascade {
    pub specific: Arc<dyn ModelBackend>,
    pub learnable: Option<Arc<dyn ModelBackend>>,
    pub large: Arc<dyn ModelBackend>,
    pub candidates: Vec<ClassId>,
    pub policy: ShuntPolicy,
    pub large_request: LargeRequest,
    pub distribution_model: Option<Arc<DistributionModel>>,
    pub prediction_model: Option<Arc<PredictionModel>>,
}

impl std::fmt::Debug for Cascade {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cascade")
            .field("specific", &self.specific.name())
            .field("learnable", &self.learnable.as_ref().map(|b| b.name().to_string()))
            .field("large", &self.large.name())
            .field("candidates", &self.candidates.len())
            .field("policy", &self.policy)
            .finish()
    }
}

struct SmallAnswer {
    tier: Tier,
    probs: ProbabilityVector,
    confidence: f64,
}

impl SmallAnswer {
    fn outcome(&self, sample_id: &str) -> RoutingOutcome {
        RoutingOutcome {
            sample_id: sample_id.to_string(),
            tier: self.tier,
            prediction: self.probs.top_class().to_string(),
            confidence: self.confidence,
            cost: 0,
            prompt_used: None,
            degraded: false,
        }
    }
}

impl Cascade {
    pub fn new(
        specific: Arc<dyn ModelBackend>,
        large: Arc<dyn ModelBackend>,
        candidates: Vec<ClassId>,
        policy: ShuntPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        if candidates.is_empty() {
            return Err(ShuntError::config("cascade has no candidate classes"));
        }
        Ok(Self {
            specific,
            learnable: None,
            large,
            candidates,
            policy,
            large_request: LargeRequest::Direct,
            distribution_model: None,
            prediction_model: None,
        })
    }

    pub fn with_learnable(mut self, learnable: Arc<dyn ModelBackend>) -> Self {
        self.learnable = Some(learnable);
        self
    }

    pub fn with_large_request(mut self, request: LargeRequest) -> Self {
        self.large_request = request;
        self
    }

    pub fn with_distribution_model(mut self, model: DistributionModel) -> Self {
        self.distribution_model = Some(Arc::new(model));
        self
    }

    pub fn with_prediction_model(mut self, model: PredictionModel) -> Self {
        self.prediction_model = Some(Arc::new(model));
        self
    }

    /// Routes with the policy's own strategy.
    pub fn route(&self, sample: &Sample) -> Result<RoutingOutcome> {
        self.route_with_strategy(sample, self.policy.strategy)
    }

    /// Routes one sample; exactly one tier serves it.
    ///
    /// A large-tier failure returns [`ShuntError::Routing`] carrying the most
    /// confident small-tier answer.
    pub fn route_with_strategy(&self, sample: &Sample, strategy: ShuntStrategy) -> Result<RoutingOutcome> {
        let mut answers: Vec<SmallAnswer> = Vec::with_capacity(2);
        let tiers = [
            (Tier::SpecificSmall, Some(&self.specific)),
            (Tier::LearnableSmall, self.learnable.as_ref()),
        ];
        for (tier, backend) in tiers {
            let Some(backend) = backend else { continue };
            let probs = classify(backend.as_ref(), sample, &self.candidates, None)?.probs;
            let (keep, confidence) = self.decide(strategy, sample, &probs)?;
            let answer = SmallAnswer {
                tier,
                probs,
                confidence,
            };
            if keep {
                return Ok(answer.outcome(&sample.id));
            }
            answers.push(answer);
        }
        match self.ask_large(sample, &answers[0].probs) {
            Ok(outcome) => Ok(outcome),
            Err(e) => {
                let best = answers
                    .iter()
                    .max_by(|a, b| a.probs.max_prob().total_cmp(&b.probs.max_prob()))
                    .expect("specific tier always answers");
                let mut fallback = best.outcome(&sample.id);
                fallback.degraded = true;
                Err(ShuntError::Routing {
                    message: e.to_string(),
                    fallback: Box::new(fallback),
                })
            }
        }
    }

    fn decide(&self, strategy: ShuntStrategy, sample: &Sample, probs: &ProbabilityVector) -> Result<(bool, f64)> {
        match strategy {
            ShuntStrategy::Confidence => {
                let c = self.policy.reduction.reduce(probs);
                Ok((c > self.policy.delta, c))
            }
            ShuntStrategy::DistributionModel => {
                let model = self.distribution_model.as_ref().ok_or_else(|| {
                    ShuntError::config("distribution-model strategy selected but no model is trained")
                })?;
                Ok((model.keeps_small(sample)?, probs.max_prob()))
            }
            ShuntStrategy::PredictionModel => {
                let model = self
                    .prediction_model
                    .as_ref()
                    .ok_or_else(|| ShuntError::config("prediction-model strategy selected but no model is trained"))?;
                Ok((model.predicts_correct(sample, probs)?, probs.max_prob()))
            }
        }
    }

    fn ask_large(&self, sample: &Sample, c_s: &ProbabilityVector) -> Result<RoutingOutcome> {
        let (probs, cost, record) = match &self.large_request {
            LargeRequest::Direct => {
                let p = classify(self.large.as_ref(), sample, &self.candidates, None)?;
                (p.probs, p.cost_micros, None)
            }
            LargeRequest::SoftPrune { builder, proficient } => {
                let record = builder.soft(c_s, proficient)?;
                let p = classify(self.large.as_ref(), sample, &self.candidates, Some(&record.rendered))?;
                (p.probs, p.cost_micros, Some(record))
            }
            LargeRequest::HardPrune { builder, proficient } => {
                let record = builder.hard(c_s, proficient, &self.candidates)?;
                let p = classify(self.large.as_ref(), sample, &record.candidates, Some(&record.rendered))?;
                (p.probs, p.cost_micros, Some(record))
            }
            LargeRequest::Transfer(pipeline) => {
                let out = pipeline.run(sample)?;
                match out.output {
                    PipelineResult::Prediction { probs, cost_micros } => (probs, cost_micros, Some(out.record)),
                    PipelineResult::Text { .. } => {
                        return Err(ShuntError::config("transfer pipeline has no large-model stage"))
                    }
                }
            }
        };
        Ok(RoutingOutcome {
            sample_id: sample.id.clone(),
            tier: Tier::Large,
            prediction: probs.top_class().to_string(),
            confidence: probs.max_prob(),
            cost,
            prompt_used: record,
            degraded: false,
        })
    }

    /// Routes every sample, degrading large-tier failures to their fallback.
    ///
    /// `workers > 1` splits the dataset into contiguous chunks; output order
    /// always follows the dataset.
    pub fn route_dataset(&self, data: &Dataset, workers: usize) -> Result<Vec<RoutingOutcome>> {
        let route_one = |s: &Sample| match self.route(s) {
            Err(ShuntError::Routing { message, fallback }) => {
                warn!(sample = %s.id, %message, "large tier failed, serving small-tier fallback");
                Ok(*fallback)
            }
            other => other,
        };
        let samples = data.samples();
        if workers <= 1 || samples.len() < 2 {
            return samples.iter().map(route_one).collect();
        }
        let chunk = samples.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(route_one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(samples.len());
            for h in handles {
                out.extend(h.join().expect("routing worker panicked")?);
            }
            Ok(out)
        })
    }
}

/// Large-tier share of `outcomes`.
pub fn query_proportion(outcomes: &[RoutingOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.tier == Tier::Large).count() as f64 / outcomes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{
        CachedBackend, ClassifyRequest, CostLedger, CostProfile, Metered, Prediction, SimulatedOracle,
        SimulatedOracleConfig,
    };
    use crate::prob::indexed_classes;
    use crate::prompting::Template;
    use rand::Rng;

    fn two(p: f64) -> ProbabilityVector {
        ProbabilityVector::new(vec![p, 1.0 - p], indexed_classes(2)).unwrap()
    }

    struct Failing;
    impl ModelBackend for Failing {
        fn name(&self) -> &str {
            "down"
        }
        fn classify(&self, _: &ClassifyRequest<'_>) -> Result<Prediction> {
            Err(ShuntError::Transport {
                message: "connection refused".into(),
                attempts: 3,
            })
        }
    }

    fn setup(s1: f64, s2: Option<f64>, large: Arc<dyn ModelBackend>) -> (Cascade, Sample) {
        let mut spec = CachedBackend::new("specific");
        spec.insert("x", two(s1));
        let mut c = Cascade::new(
            Arc::new(spec),
            large,
            indexed_classes(2),
            ShuntPolicy::new(0.97).unwrap(),
        )
        .unwrap();
        if let Some(p) = s2 {
            let mut l = CachedBackend::new("learnable");
            l.insert("x", two(p));
            c = c.with_learnable(Arc::new(l));
        }
        (c, Sample::text("x", "input").with_gold("c0"))
    }

    fn metered_oracle(ledger: &Arc<CostLedger>) -> Arc<dyn ModelBackend> {
        let oracle = SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(0.9, 1)).unwrap();
        Arc::new(Metered::new(
            Arc::new(oracle),
            CostProfile::per_input_token(1.0),
            ledger.clone(),
        ))
    }

    #[test]
    fn confident_specific_tier_skips_large() {
        let ledger = CostLedger::new();
        let (c, s) = setup(0.99, Some(0.2), metered_oracle(&ledger));
        let o = c.route(&s).unwrap();
        assert_eq!(o.tier, Tier::SpecificSmall);
        assert_eq!(o.cost, 0);
        assert_eq!(ledger.summary().calls, 0);
    }

    #[test]
    fn learnable_tier_is_second() {
        let ledger = CostLedger::new();
        let (c, s) = setup(0.50, Some(0.98), metered_oracle(&ledger));
        assert_eq!(c.route(&s).unwrap().tier, Tier::LearnableSmall);
        assert_eq!(ledger.summary().calls, 0);
    }

    #[test]
    fn equality_goes_to_next_tier() {
        let ledger = CostLedger::new();
        let (c, s) = setup(0.97, None, metered_oracle(&ledger));
        let o = c.route(&s).unwrap();
        assert_eq!(o.tier, Tier::Large);
        assert!(o.cost > 0);
        assert_eq!(ledger.summary().calls, 1);
    }

    #[test]
    fn large_failure_degrades_to_best_small() {
        let (c, s) = setup(0.6, Some(0.9), Arc::new(Failing));
        match c.route(&s) {
            Err(ShuntError::Routing { fallback, .. }) => {
                assert_eq!(fallback.tier, Tier::LearnableSmall);
                assert!(fallback.degraded);
            }
            other => panic!("expected routing error, got {other:?}"),
        }
        let data = Dataset::new(vec![s]).unwrap();
        let out = c.route_dataset(&data, 1).unwrap();
        assert!(out[0].degraded);
    }

    #[test]
    fn missing_aux_model_is_config_error() {
        let (c, s) = setup(0.99, None, Arc::new(Failing));
        let err = c.route_with_strategy(&s, ShuntStrategy::PredictionModel).unwrap_err();
        assert!(matches!(err, ShuntError::Config(_)));
    }

    #[test]
    fn confidence_strategy_is_default() {
        let (c, s) = setup(
            0.5,
            None,
            Arc::new(SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(0.9, 1)).unwrap()),
        );
        assert_eq!(
            c.route(&s).unwrap(),
            c.route_with_strategy(&s, ShuntStrategy::Confidence).unwrap()
        );
    }

    #[test]
    fn hard_prune_shrinks_large_candidates() {
        let ledger = CostLedger::new();
        let (c, s) = setup(0.6, None, metered_oracle(&ledger));
        let builder = PromptBuilder::new(Template::parse("Options: {candidates}").unwrap()).unwrap();
        let c = c.with_large_request(LargeRequest::HardPrune {
            builder,
            proficient: ProficiencySet::explicit(["c1"]),
        });
        let o = c.route(&s).unwrap();
        let rec = o.prompt_used.unwrap();
        assert_eq!(rec.candidates, vec!["c0".to_string()]);
        assert_eq!(o.prediction, "c0");
    }

    #[test]
    fn brute_force_query_proportion_and_parallel_equivalence() {
        let mut rng = crate::seed::rng_for(5, "router-test");
        let mut spec = CachedBackend::new("specific");
        let mut samples = Vec::new();
        for i in 0..2000 {
            let id = format!("s{i}");
            let p: f64 = rng.random_range(0.5..1.0);
            spec.insert(id.clone(), two(p));
            samples.push(Sample::text(id, "t").with_gold("c0"));
        }
        let data = Dataset::new(samples).unwrap();
        let large = Arc::new(SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(0.9, 2)).unwrap());
        let c = Cascade::new(
            Arc::new(spec.clone()),
            large,
            indexed_classes(2),
            ShuntPolicy::new(0.9).unwrap(),
        )
        .unwrap();
        let seq = c.route_dataset(&data, 1).unwrap();
        let par = c.route_dataset(&data, 4).unwrap();
        assert_eq!(seq, par);
        let expect = spec.answers.values().filter(|p| p.max_prob() <= 0.9).count();
        let got = seq.iter().filter(|o| o.tier == Tier::Large).count();
        assert_eq!(got, expect);
        assert_eq!(query_proportion(&seq), expect as f64 / 2000.0);
    }
}
