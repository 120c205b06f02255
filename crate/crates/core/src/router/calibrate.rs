use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{classify, Dataset, ModelBackend};
use crate::error::{Result, ShuntError};
use crate::prob::ClassId;

/// Ordered list of candidate thresholds, each in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DeltaGrid(Vec<f64>);

impl TryFrom<Vec<f64>> for DeltaGrid {
    type Error = ShuntError;

    fn try_from(mut v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(ShuntError::config("delta grid is empty"));
        }
        if let Some(d) = v.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return Err(ShuntError::config(format!("grid delta {d} outside (0,1)")));
        }
        v.sort_by(f64::total_cmp);
        v.dedup();
        Ok(Self(v))
    }
}

impl From<DeltaGrid> for Vec<f64> {
    fn from(g: DeltaGrid) -> Self {
        g.0
    }
}

impl FromStr for DeltaGrid {
    type Err = ShuntError;

    /// `lo:hi:step` (inclusive) or a comma-separated list.
    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| ShuntError::config(format!("bad number `{t}` in delta grid")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [lo, hi, step] => {
                let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
                if !(step > 0.0) || hi < lo {
                    return Err(ShuntError::config(format!("bad delta range `{s}`")));
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                // Rounded so 0.85 + 12·0.01 prints and compares as 0.97.
                let values: Vec<f64> = (0..=n)
                    .map(|i| ((lo + i as f64 * step) * 1e10).round() / 1e10)
                    .collect();
                Self::try_from(values)
            }
            [list] => Self::try_from(list.split(',').map(num).collect::<Result<Vec<_>>>()?),
            _ => Err(ShuntError::config(format!("bad delta grid `{s}`"))),
        }
    }
}

impl DeltaGrid {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CalibrationObjective {
    /// Cascade accuracy at least `target`; without a target, the large model's
    /// own accuracy on the validation set.
    MatchLargeAccuracy {
        target: Option<f64>,
    },
    MaxAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub accuracy: f64,
    pub query_proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub chosen_delta: f64,
    pub sweep: Vec<SweepPoint>,
    /// False when no grid point satisfied the objective; `chosen_delta` is then
    /// the most accurate point.
    pub met: bool,
    pub target_accuracy: Option<f64>,
}

/// Accuracy of the large model alone over the labelled part of `data`.
pub fn large_only_accuracy(data: &Dataset, large: &dyn ModelBackend, candidates: &[ClassId]) -> Result<f64> {
    let mut hit = 0usize;
    let mut n = 0usize;
    for s in data {
        let Some(gold) = &s.gold_label else { continue };
        n += 1;
        hit += usize::from(classify(large, s, candidates, None)?.probs.top_class() == gold);
    }
    if n == 0 {
        return Err(ShuntError::domain("no labelled samples"));
    }
    Ok(hit as f64 / n as f64)
}

/// Sweeps `grid`, simulating the two-tier cascade on `validation`.
///
/// The large model is queried once per sample whose small confidence is at
/// or below the largest grid value (every sample when the objective needs the
/// large-only accuracy).
pub fn calibrate_delta(
    validation: &Dataset,
    specific: &dyn ModelBackend,
    large: &dyn ModelBackend,
    candidates: &[ClassId],
    grid: &DeltaGrid,
    objective: CalibrationObjective,
) -> Result<CalibrationResult> {
    let top = *grid.values().last().expect("grid non-empty");
    let need_all = matches!(objective, CalibrationObjective::MatchLargeAccuracy { target: None });
    // (small confidence, small correct, large correct if queried)
    let mut rows: Vec<(f64, bool, Option<bool>)> = Vec::new();
    for s in validation {
        let Some(gold) = &s.gold_label else { continue };
        let small = classify(specific, s, candidates, None)?.probs;
        let conf = small.max_prob();
        let large_ok = if need_all || conf <= top {
            Some(classify(large, s, candidates, None)?.probs.top_class() == gold)
        } else {
            None
        };
        rows.push((conf, small.top_class() == gold, large_ok));
    }
    if rows.is_empty() {
        return Err(ShuntError::domain("calibration needs labelled validation samples"));
    }
    let n = rows.len() as f64;
    let target = match objective {
        CalibrationObjective::MatchLargeAccuracy { target: Some(t) } => Some(t),
        CalibrationObjective::MatchLargeAccuracy { target: None } => {
            Some(rows.iter().filter(|r| r.2 == Some(true)).count() as f64 / n)
        }
        CalibrationObjective::MaxAccuracy => None,
    };

    let sweep: Vec<SweepPoint> = grid
        .values()
        .iter()
        .map(|&delta| {
            let mut correct = 0usize;
            let mut large = 0usize;
            for &(conf, small_ok, large_ok) in &rows {
                let ok = if conf > delta {
                    small_ok
                } else {
                    large += 1;
                    large_ok.expect("queried below the top of the grid")
                };
                correct += usize::from(ok);
            }
            SweepPoint {
                delta,
                accuracy: correct as f64 / n,
                query_proportion: large as f64 / n,
            }
        })
        .collect();

    let best = sweep
        .iter()
        .fold(None::<&SweepPoint>, |acc, p| match acc {
            Some(b) if b.accuracy >= p.accuracy => Some(b),
            _ => Some(p),
        })
        .expect("grid non-empty");
    let (chosen, met) = match target {
        Some(t) => match sweep.iter().find(|p| p.accuracy >= t) {
            Some(p) => (p.delta, true),
            None => (best.delta, false),
        },
        None => (best.delta, true),
    };
    Ok(CalibrationResult {
        chosen_delta: chosen,
        sweep,
        met,
        target_accuracy: target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{CachedBackend, Sample, SimulatedOracle, SimulatedOracleConfig};
    use crate::prob::{indexed_classes, ProbabilityVector};
    use proptest::prelude::*;

    #[test]
    fn grid_parsing() {
        let g: DeltaGrid = "0.85:0.99:0.01".parse().unwrap();
        assert_eq!(g.values().len(), 15);
        assert_eq!(g.values()[12], 0.97);
        assert_eq!(*g.values().last().unwrap(), 0.99);
        let g: DeltaGrid = "0.99,0.97".parse().unwrap();
        assert_eq!(g.values(), &[0.97, 0.99]);
        assert!("1.0:0.5:0.1".parse::<DeltaGrid>().is_err());
        assert!("0.5:1.0:0.1".parse::<DeltaGrid>().is_err());
        assert!("a,b".parse::<DeltaGrid>().is_err());
    }

    fn cached(confs: &[(f64, bool)]) -> (Dataset, CachedBackend) {
        let mut b = CachedBackend::new("specific");
        let mut samples = Vec::new();
        for (i, &(c, right)) in confs.iter().enumerate() {
            let id = format!("v{i}");
            let p = ProbabilityVector::new(vec![c, 1.0 - c], indexed_classes(2)).unwrap();
            b.insert(id.clone(), p);
            samples.push(Sample::text(id, "x").with_gold(if right { "c0" } else { "c1" }));
        }
        (Dataset::new(samples).unwrap(), b)
    }

    #[test]
    fn perfect_small_model_picks_smallest_delta() {
        let (data, spec) = cached(&[(0.99, true), (0.9, true), (0.6, true), (0.999, true)]);
        let large = SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(0.5, 1)).unwrap();
        let grid: DeltaGrid = "0.85:0.99:0.01".parse().unwrap();
        let r = calibrate_delta(
            &data,
            &spec,
            &large,
            &indexed_classes(2),
            &grid,
            CalibrationObjective::MatchLargeAccuracy { target: Some(0.75) },
        )
        .unwrap();
        assert!(r.met);
        assert_eq!(r.chosen_delta, 0.85);
        assert_eq!(r.sweep[0].query_proportion, 0.25);
    }

    #[test]
    fn unmet_objective_is_flagged() {
        let (data, spec) = cached(&[(0.99, false), (0.99, false)]);
        let large = SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(0.0, 1)).unwrap();
        let grid: DeltaGrid = "0.9,0.95".parse().unwrap();
        let r = calibrate_delta(
            &data,
            &spec,
            &large,
            &indexed_classes(2),
            &grid,
            CalibrationObjective::MatchLargeAccuracy { target: Some(0.9) },
        )
        .unwrap();
        assert!(!r.met);
    }

    proptest! {
        #[test]
        fn query_proportion_monotone(confs in prop::collection::vec((0.5f64..1.0, any::<bool>()), 1..200)) {
            let (data, spec) = cached(&confs);
            let large = SimulatedOracle::new(SimulatedOracleConfig::with_accuracy(0.9, 7)).unwrap();
            let grid: DeltaGrid = "0.5:0.99:0.01".parse().unwrap();
            let r = calibrate_delta(&data, &spec, &large, &indexed_classes(2), &grid, CalibrationObjective::MaxAccuracy).unwrap();
            for w in r.sweep.windows(2) {
                prop_assert!(w[0].query_proportion <= w[1].query_proportion);
            }
            for p in &r.sweep {
                let brute = confs.iter().filter(|(c, _)| *c <= p.delta).count() as f64 / confs.len() as f64;
                prop_assert_eq!(p.query_proportion, brute);
            }
        }
    }
}
