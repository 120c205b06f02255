//! Accuracy / query-proportion / cost reports and BLEU.

mod bleu;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, corpus_bleu, BleuAccumulator, BleuLevel, BleuScore, MAX_ORDER};

use crate::backends::{Dataset, LedgerSummary};
use crate::error::{Result, ShuntError};
use crate::router::{RoutingOutcome, Tier};

pub const UNCATEGORIZED: &str = "(none)";

/// Exact counts for one slice of outcomes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    /// Outcomes in the slice.
    pub n: usize,
    /// Outcomes whose gold label is known.
    pub scored: usize,
    pub correct: usize,
    /// Outcomes served by the large tier.
    pub large: usize,
    pub accuracy: f64,
    pub query_proportion: f64,
}

impl SliceStats {
    fn add(&mut self, scored: bool, correct: bool, large: bool) {
        self.n += 1;
        self.scored += usize::from(scored);
        self.correct += usize::from(correct);
        self.large += usize::from(large);
    }

    fn finish(&mut self) {
        self.accuracy = if self.scored == 0 {
            0.0
        } else {
            self.correct as f64 / self.scored as f64
        };
        self.query_proportion = if self.n == 0 {
            0.0
        } else {
            self.large as f64 / self.n as f64
        };
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_only_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub large_only_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub large_only_cost: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_category: BTreeMap<String, SliceStats>,
    pub overall: SliceStats,
    pub tiers: BTreeMap<Tier, usize>,
    /// Micro-currency units.
    pub total_cost: u64,
    /// Outcomes without a gold label.
    pub unscored: usize,
    pub degraded: usize,
    #[serde(default)]
    pub baselines: Baselines,
}

/// Scores `outcomes` against `gold`. Every outcome must name a sample in `gold`.
pub fn evaluate(outcomes: &[RoutingOutcome], gold: &Dataset) -> Result<EvaluationReport> {
    let index = gold.by_id();
    let mut seen = HashSet::with_capacity(outcomes.len());
    let mut per_category: BTreeMap<String, SliceStats> = BTreeMap::new();
    let mut overall = SliceStats::default();
    let mut tiers = BTreeMap::new();
    let mut total_cost = 0u64;
    let mut degraded = 0usize;
    for o in outcomes {
        let sample = index
            .get(o.sample_id.as_str())
            .ok_or_else(|| ShuntError::domain(format!("outcome for unknown sample `{}`", o.sample_id)))?;
        if !seen.insert(o.sample_id.as_str()) {
            return Err(ShuntError::domain(format!(
                "duplicate outcome for sample `{}`",
                o.sample_id
            )));
        }
        let scored = sample.gold_label.is_some();
        let correct = sample.gold_label.as_deref() == Some(o.prediction.as_str());
        let large = o.tier == Tier::Large;
        let category = sample.category.clone().unwrap_or_else(|| UNCATEGORIZED.to_string());
        per_category.entry(category).or_default().add(scored, correct, large);
        overall.add(scored, correct, large);
        *tiers.entry(o.tier).or_insert(0) += 1;
        total_cost += o.cost;
        degraded += usize::from(o.degraded);
    }
    per_category.values_mut().for_each(SliceStats::finish);
    overall.finish();
    Ok(EvaluationReport {
        unscored: overall.n - overall.scored,
        per_category,
        overall,
        tiers,
        total_cost,
        degraded,
        baselines: Baselines::default(),
    })
}

impl EvaluationReport {
    pub fn with_baselines(mut self, baselines: Baselines) -> Self {
        self.baselines = baselines;
        self
    }

    /// True when `total_cost` matches the ledger to the micro-unit.
    pub fn matches_ledger(&self, ledger: &LedgerSummary) -> bool {
        self.total_cost == ledger.total_micros
    }

    /// One JSON object per category, then one `"overall"` line.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            category: &'a str,
            #[serde(flatten)]
            stats: &'a SliceStats,
        }
        #[derive(Serialize)]
        struct Overall<'a> {
            category: &'a str,
            #[serde(flatten)]
            stats: &'a SliceStats,
            tiers: &'a BTreeMap<Tier, usize>,
            total_cost_micros: u64,
            unscored: usize,
            degraded: usize,
            baselines: &'a Baselines,
        }
        let mut out = String::new();
        for (category, stats) in &self.per_category {
            out += &serde_json::to_string(&Row { category, stats })?;
            out.push('\n');
        }
        out += &serde_json::to_string(&Overall {
            category: "overall",
            stats: &self.overall,
            tiers: &self.tiers,
            total_cost_micros: self.total_cost,
            unscored: self.unscored,
            degraded: self.degraded,
            baselines: &self.baselines,
        })?;
        out.push('\n');
        Ok(out)
    }

    /// Aligned text table with `accuracy|query` cells.
    pub fn to_table(&self) -> String {
        let cell = |s: &SliceStats| format!("{:.2}|{:.2}", 100.0 * s.accuracy, 100.0 * s.query_proportion);
        let width = self
            .per_category
            .keys()
            .map(String::len)
            .chain(["category".len(), "Overall".len()])
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>13}", "category", "n", "acc%|query%");
        for (category, s) in &self.per_category {
            let _ = writeln!(out, "{:<width$}  {:>7}  {:>13}", category, s.n, cell(s));
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>13}",
            "Overall",
            self.overall.n,
            cell(&self.overall)
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "query proportion  {:.2}%", 100.0 * self.overall.query_proportion);
        let tiers: Vec<String> = self
            .tiers
            .iter()
            .map(|(t, n)| format!("{}={n}", tier_name(*t)))
            .collect();
        let _ = writeln!(out, "tiers             {}", tiers.join(" "));
        let _ = writeln!(out, "total cost        {}", format_micros(self.total_cost));
        if self.unscored > 0 {
            let _ = writeln!(out, "unscored          {}", self.unscored);
        }
        if self.degraded > 0 {
            let _ = writeln!(out, "degraded          {}", self.degraded);
        }
        if let Some(a) = self.baselines.small_only_accuracy {
            let _ = writeln!(out, "small-only acc    {:.2}%", 100.0 * a);
        }
        if let Some(a) = self.baselines.large_only_accuracy {
            let _ = writeln!(out, "large-only acc    {:.2}%", 100.0 * a);
        }
        if let Some(c) = self.baselines.large_only_cost {
            let _ = writeln!(out, "large-only cost   {}", format_micros(c));
        }
        out
    }
}

fn tier_name(t: Tier) -> &'static str {
    match t {
        Tier::SpecificSmall => "specific_small",
        Tier::LearnableSmall => "learnable_small",
        Tier::Large => "large",
    }
}

/// Micro-units as a decimal currency amount with six places.
pub fn format_micros(m: u64) -> String {
    format!("{}.{:06}", m / 1_000_000, m % 1_000_000)
}
