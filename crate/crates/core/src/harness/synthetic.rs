use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backends::{Dataset, Sample};
use crate::error::{Result, ShuntError};
use crate::prob::{indexed_classes, ClassId};
use crate::seed::rng_for;

fn default_features() -> usize {
    8
}

fn default_noise() -> f64 {
    1.0
}

fn default_regions() -> Vec<String> {
    vec!["head".into(), "med".into(), "tail".into()]
}

fn default_prefix() -> String {
    "s".into()
}

/// Gaussian class clusters with long-tailed region sizes.
///
/// Classes `c0..` are split into contiguous regions; region `r` receives
/// `skew[r] / Σ skew` of the samples, shared evenly among its classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    pub n_samples: usize,
    #[serde(default = "default_features")]
    pub n_features: usize,
    /// Norm of each class mean.
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub skew: Vec<f64>,
    #[serde(default = "default_regions")]
    pub regions: Vec<String>,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_features == 0 {
            return Err(ShuntError::domain(
                "synthetic task needs at least one class and feature",
            ));
        }
        if self.skew.is_empty() || self.skew.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(ShuntError::domain("skew ratios must be positive"));
        }
        if self.regions.len() != self.skew.len() {
            return Err(ShuntError::domain(format!(
                "{} region names for {} skew ratios",
                self.regions.len(),
                self.skew.len()
            )));
        }
        if self.skew.len() > self.n_classes {
            return Err(ShuntError::domain("more regions than classes"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(ShuntError::domain("label noise must be in [0,1)"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) || !(self.noise_std >= 0.0) {
            return Err(ShuntError::domain(
                "separation and noise must be finite and non-negative",
            ));
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<ClassId> {
        indexed_classes(self.n_classes)
    }

    /// Region index of class `c`.
    pub fn region_of(&self, c: usize) -> usize {
        c * self.skew.len() / self.n_classes
    }

    /// Samples per class after largest-remainder rounding.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let region_counts = largest_remainder(self.n_samples, &self.skew);
        let mut counts = vec![0usize; self.n_classes];
        for (r, &rc) in region_counts.iter().enumerate() {
            let members: Vec<usize> = (0..self.n_classes).filter(|&c| self.region_of(c) == r).collect();
            for (c, k) in members.iter().zip(largest_remainder(rc, &vec![1.0; members.len()])) {
                counts[*c] = k;
            }
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(ShuntError::domain(format!(
                "skew leaves class c{c} with no samples; raise n_samples or flatten the skew"
            )));
        }
        Ok(counts)
    }

    /// Unit-norm direction per class scaled by `separation`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = rng_for(self.seed, "synthetic/means");
        (0..self.n_classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.n_features).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.iter().map(|x| x / norm * self.separation).collect()
            })
            .collect()
    }
}

/// Splits `total` proportionally to `weights`; leftovers go to the largest
/// fractional parts, ties to the earlier index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    let counts = spec.class_counts()?;
    let means = spec.class_means();
    let mut rng = rng_for(spec.seed, "synthetic/samples");
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| ShuntError::domain(e.to_string()))?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(spec.n_samples);
    for (c, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            let x = means[c].iter().map(|m| m + noise.sample(&mut rng)).collect();
            rows.push((c, x));
        }
    }
    rows.shuffle(&mut rng);
    let width = spec.n_samples.max(1).to_string().len();
    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(i, (c, x))| {
            let flip: f64 = rng.random();
            let other: usize = rng.random_range(0..spec.n_classes.max(2) - 1);
            let label = if spec.n_classes > 1 && flip < spec.label_noise {
                if other >= c {
                    other + 1
                } else {
                    other
                }
            } else {
                c
            };
            Sample::features(format!("{}{:0width$}", spec.id_prefix, i), x)
                .with_gold(format!("c{label}"))
                .with_category(spec.regions[spec.region_of(c)].clone())
        })
        .collect();
    Dataset::new(samples)
}
