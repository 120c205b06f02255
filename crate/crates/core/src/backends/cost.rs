use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ClassifyRequest, Generation, ModelBackend, Prediction};
use crate::error::{Result, ShuntError};

const MICROS_PER_UNIT: f64 = 1_000_000.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Prices in currency units. Charges are computed in integer micro-units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    #[serde(default)]
    pub price_per_input_token: f64,
    #[serde(default)]
    pub price_per_output_token: f64,
    #[serde(default)]
    pub fixed_per_call: f64,
}

fn to_micros(price: f64) -> u64 {
    (price * MICROS_PER_UNIT).round() as u64
}

impl CostProfile {
    pub fn per_input_token(price: f64) -> Self {
        Self {
            price_per_input_token: price,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("price_per_input_token", self.price_per_input_token),
            ("price_per_output_token", self.price_per_output_token),
            ("fixed_per_call", self.fixed_per_call),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(ShuntError::config(format!("{name} must be a finite value >= 0")));
            }
        }
        Ok(())
    }

    pub fn is_free(&self) -> bool {
        self.charge(TokenUsage {
            input_tokens: 1,
            output_tokens: 1,
        }) == 0
    }

    /// in·price_in + out·price_out + fixed, in micro-units.
    pub fn charge(&self, usage: TokenUsage) -> u64 {
        usage.input_tokens * to_micros(self.price_per_input_token)
            + usage.output_tokens * to_micros(self.price_per_output_token)
            + to_micros(self.fixed_per_call)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub backend: String,
    pub sample_id: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost_micros: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub total_micros: u64,
}

/// Append-only record of billed calls. Totals are atomics so concurrent
/// requests can charge without contending on the entry list lock.
#[derive(Debug, Default)]
pub struct CostLedger {
    calls: AtomicU64,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
    total_micros: AtomicU64,
    entries: Mutex<Vec<LedgerEntry>>,
}

impl CostLedger {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn record(&self, entry: LedgerEntry) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.input_tokens.fetch_add(entry.input_tokens, Ordering::Relaxed);
        self.output_tokens.fetch_add(entry.output_tokens, Ordering::Relaxed);
        self.total_micros.fetch_add(entry.cost_micros, Ordering::Relaxed);
        self.entries.lock().expect("ledger lock poisoned").push(entry);
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            calls: self.calls.load(Ordering::Relaxed),
            input_tokens: self.input_tokens.load(Ordering::Relaxed),
            output_tokens: self.output_tokens.load(Ordering::Relaxed),
            total_micros: self.total_micros.load(Ordering::Relaxed),
        }
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.entries.lock().expect("ledger lock poisoned").clone()
    }

    pub fn calls_for(&self, sample_id: &str) -> usize {
        self.entries
            .lock()
            .expect("ledger lock poisoned")
            .iter()
            .filter(|e| e.sample_id == sample_id)
            .count()
    }
}

/// Wraps a backend so every successful call is priced and recorded.
pub struct Metered {
    inner: Arc<dyn ModelBackend>,
    profile: CostProfile,
    ledger: Arc<CostLedger>,
}

impl Metered {
    pub fn new(inner: Arc<dyn ModelBackend>, profile: CostProfile, ledger: Arc<CostLedger>) -> Self {
        Self { inner, profile, ledger }
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.ledger
    }

    pub fn profile(&self) -> CostProfile {
        self.profile
    }

    fn bill(&self, sample_id: &str, usage: TokenUsage) -> u64 {
        let cost = self.profile.charge(usage);
        self.ledger.record(LedgerEntry {
            backend: self.inner.name().to_string(),
            sample_id: sample_id.to_string(),
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
            cost_micros: cost,
        });
        cost
    }
}

impl ModelBackend for Metered {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Prediction> {
        let mut prediction = self.inner.classify(request)?;
        prediction.cost_micros = self.bill(&request.sample.id, prediction.usage);
        Ok(prediction)
    }

    fn generate(&self, prompt: &str) -> Result<Generation> {
        let mut generation = self.inner.generate(prompt)?;
        generation.cost_micros = self.bill("<generate>", generation.usage);
        Ok(generation)
    }
}
