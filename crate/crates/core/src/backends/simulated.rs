use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{ClassifyRequest, ModelBackend, Payload, Prediction, TokenUsage, Tokenizer, WhitespaceTokenizer};
use crate::error::{Result, ShuntError};
use crate::prob::{ClassId, ProbabilityVector};
use crate::seed::rng_for;

/// Distribution the oracle draws its top-class confidence from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfidenceDist {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl ConfidenceDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ConfidenceDist::Fixed { value } => (0.0..=1.0).contains(&value),
            ConfidenceDist::Uniform { low, high } => {
                (0.0..=1.0).contains(&low) && (0.0..=1.0).contains(&high) && low <= high
            }
            ConfidenceDist::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ShuntError::config(format!("invalid confidence distribution {self:?}")))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ConfidenceDist::Fixed { value } => value,
            ConfidenceDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            ConfidenceDist::Beta { alpha, beta } => {
                Beta::new(alpha, beta).expect("validated beta parameters").sample(rng)
            }
        }
    }
}

fn default_name() -> String {
    "simulated-large".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedOracleConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Accuracy for samples whose gold label is not listed here.
    pub default_accuracy: f64,
    #[serde(default)]
    pub per_class_accuracy: BTreeMap<ClassId, f64>,
    pub confidence_when_correct: ConfidenceDist,
    pub confidence_when_wrong: ConfidenceDist,
    pub seed: u64,
    /// Classes the oracle knows; `None` accepts any candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<ClassId>>,
}

impl SimulatedOracleConfig {
    pub fn with_accuracy(accuracy: f64, seed: u64) -> Self {
        Self {
            name: default_name(),
            default_accuracy: accuracy,
            per_class_accuracy: BTreeMap::new(),
            confidence_when_correct: ConfidenceDist::Uniform { low: 0.9, high: 0.999 },
            confidence_when_wrong: ConfidenceDist::Uniform { low: 0.5, high: 0.95 },
            seed,
            classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let accs = std::iter::once(&self.default_accuracy).chain(self.per_class_accuracy.values());
        for a in accs {
            if !(0.0..=1.0).contains(a) {
                return Err(ShuntError::config(format!("oracle accuracy {a} outside [0,1]")));
            }
        }
        self.confidence_when_correct.validate()?;
        self.confidence_when_wrong.validate()
    }
}

/// A stand-in large model with configurable per-class accuracy.
///
/// Randomness is derived from `(seed, sample id)` alone, so answers do not
/// depend on call order, concurrency, or on which other samples were asked.
pub struct SimulatedOracle {
    config: SimulatedOracleConfig,
    tokenizer: Arc<dyn Tokenizer>,
}

impl std::fmt::Debug for SimulatedOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedOracle").field("config", &self.config).finish()
    }
}

impl SimulatedOracle {
    pub fn new(config: SimulatedOracleConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            tokenizer: Arc::new(WhitespaceTokenizer),
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn config(&self) -> &SimulatedOracleConfig {
        &self.config
    }

    fn accuracy_for(&self, gold: &str) -> f64 {
        self.config
            .per_class_accuracy
            .get(gold)
            .copied()
            .unwrap_or(self.config.default_accuracy)
    }

    fn usage(&self, request: &ClassifyRequest<'_>) -> TokenUsage {
        let input = match (request.prompt, &request.sample.payload) {
            (Some(prompt), _) => self.tokenizer.count(prompt),
            (None, Payload::Text(t)) => self.tokenizer.count(t),
            (None, Payload::Features(f)) => f.len(),
        };
        TokenUsage {
            input_tokens: input as u64,
            output_tokens: 1,
        }
    }
}

impl ModelBackend for SimulatedOracle {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Prediction> {
        let candidates = request.candidates;
        if let Some(known) = &self.config.classes {
            if let Some(c) = candidates.iter().find(|c| !known.contains(c)) {
                return Err(ShuntError::domain(format!(
                    "candidate `{c}` unknown to backend `{}`",
                    self.config.name
                )));
            }
        }
        let n = candidates.len();
        let mut rng = rng_for(self.config.seed, &request.sample.id);
        // Fixed draw order keeps every stream aligned regardless of outcome.
        let hit: f64 = rng.random();
        let conf_correct = self.config.confidence_when_correct.sample(&mut rng);
        let conf_wrong = self.config.confidence_when_wrong.sample(&mut rng);
        let pick: f64 = rng.random();

        let gold = request.sample.gold_label.as_deref();
        let gold_idx = gold.and_then(|g| candidates.iter().position(|c| c == g));
        let (top, confidence) = match gold_idx {
            Some(g) if hit < self.accuracy_for(&candidates[g]) => (g, conf_correct),
            Some(g) if n > 1 => {
                let k = ((pick * (n - 1) as f64) as usize).min(n - 2);
                (if k >= g { k + 1 } else { k }, conf_wrong)
            }
            Some(g) => (g, conf_wrong),
            None => (((pick * n as f64) as usize).min(n - 1), conf_wrong),
        };

        let probs = if n == 1 {
            vec![1.0]
        } else {
            let top_p = confidence.max(1.0 / n as f64);
            let rest = (1.0 - top_p) / (n - 1) as f64;
            (0..n).map(|i| if i == top { top_p } else { rest }).collect()
        };
        Ok(Prediction {
            probs: ProbabilityVector::from_weights(probs, candidates.to_vec())?,
            usage: self.usage(request),
            cost_micros: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{classify, Sample};

    fn classes(n: usize) -> Vec<ClassId> {
        (0..n).map(|i| format!("k{i}")).collect()
    }

    #[test]
    fn perfect_oracle_returns_gold() {
        let mut cfg = SimulatedOracleConfig::with_accuracy(0.0, 3);
        cfg.per_class_accuracy.insert("pos".into(), 1.0);
        let oracle = SimulatedOracle::new(cfg).unwrap();
        let cands = vec!["neg".to_string(), "pos".to_string()];
        for i in 0..50 {
            let s = Sample::text(format!("s{i}"), "great product").with_gold("pos");
            assert_eq!(classify(&oracle, &s, &cands, None).unwrap().probs.top_class(), "pos");
        }
    }

    #[test]
    fn empirical_accuracy_matches_config() {
        let oracle = SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(0.9, 42)).unwrap();
        let cands = classes(5);
        let n = 10_000;
        let correct = (0..n)
            .filter(|i| {
                let s = Sample::features(format!("id-{i}"), vec![1.0]).with_gold(cands[i % 5].clone());
                classify(&oracle, &s, &cands, None).unwrap().probs.top_class() == cands[i % 5]
            })
            .count();
        // binomial sd at n = 10^4 is 0.003
        let acc = correct as f64 / n as f64;
        assert!((acc - 0.9).abs() < 0.01, "accuracy {acc}");
    }

    #[test]
    fn answers_are_order_independent_and_reproducible() {
        let cfg = SimulatedOracleConfig::with_accuracy(0.7, 9);
        let a = SimulatedOracle::new(cfg.clone()).unwrap();
        let b = SimulatedOracle::new(cfg).unwrap();
        let cands = classes(4);
        let samples: Vec<Sample> = (0..200)
            .map(|i| Sample::features(format!("x{i}"), vec![0.5]).with_gold(cands[i % 4].clone()))
            .collect();
        let forward: Vec<_> = samples
            .iter()
            .map(|s| classify(&a, s, &cands, None).unwrap().probs)
            .collect();
        let backward: Vec<_> = samples
            .iter()
            .rev()
            .map(|s| classify(&b, s, &cands, None).unwrap().probs)
            .collect();
        for (x, y) in forward.iter().zip(backward.iter().rev()) {
            assert_eq!(x.probs(), y.probs());
        }
    }

    #[test]
    fn unknown_candidate_is_domain_error() {
        let mut cfg = SimulatedOracleConfig::with_accuracy(0.9, 1);
        cfg.classes = Some(classes(2));
        let oracle = SimulatedOracle::new(cfg).unwrap();
        let s = Sample::text("a", "b");
        let err = classify(&oracle, &s, &["zzz".to_string()], None).unwrap_err();
        assert!(matches!(err, ShuntError::Domain(_)));
    }

    #[test]
    fn usage_counts_prompt_tokens() {
        let oracle = SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(1.0, 1)).unwrap();
        let s = Sample::text("a", "one two three");
        let cands = classes(2);
        let p = classify(&oracle, &s, &cands, None).unwrap();
        assert_eq!(p.usage.input_tokens, 3);
        let p = classify(&oracle, &s, &cands, Some("a b c d e")).unwrap();
        assert_eq!(p.usage.input_tokens, 5);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(1.5, 1)).is_err());
        let mut cfg = SimulatedOracleConfig::with_accuracy(0.5, 1);
        cfg.confidence_when_wrong = ConfidenceDist::Uniform { low: 0.9, high: 0.1 };
        assert!(SimulatedOracle::new(cfg).is_err());
    }
}
