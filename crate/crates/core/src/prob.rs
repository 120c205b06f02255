//! Probability and information-theory kernels.
//!
//! Everything here works in nats. Confidence vectors produced by any backend
//! pass through [`ProbabilityVector::new`] before they reach the router, so the
//! rest of the crate can assume normalized, finite distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShuntError};

/// Absolute tolerance used for every normalization and ordering check.
pub const PROB_TOLERANCE: f64 = 1e-9;

pub type ClassId = String;

/// Raw per-class scores from a model head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ShuntError::domain("logit vector is empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ShuntError::domain(format!("logit {i} is not finite ({})", values[i])));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest logit; the first one wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// A normalized distribution over an ordered list of class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbabilityVector")]
pub struct ProbabilityVector {
    probs: Vec<f64>,
    class_ids: Vec<ClassId>,
}

#[derive(Deserialize)]
struct RawProbabilityVector {
    probs: Vec<f64>,
    class_ids: Vec<ClassId>,
}

impl TryFrom<RawProbabilityVector> for ProbabilityVector {
    type Error = ShuntError;

    fn try_from(raw: RawProbabilityVector) -> Result<Self> {
        ProbabilityVector::new(raw.probs, raw.class_ids)
    }
}

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>, class_ids: Vec<ClassId>) -> Result<Self> {
        if probs.is_empty() {
            return Err(ShuntError::domain("probability vector is empty"));
        }
        if probs.len() != class_ids.len() {
            return Err(ShuntError::domain(format!(
                "{} probabilities for {} class ids",
                probs.len(),
                class_ids.len()
            )));
        }
        for (p, c) in probs.iter().zip(&class_ids) {
            if !p.is_finite() || *p < 0.0 || *p > 1.0 + PROB_TOLERANCE {
                return Err(ShuntError::domain(format!(
                    "probability for class `{c}` out of range: {p}"
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(ShuntError::domain(format!("probabilities sum to {total}, not 1")));
        }
        let mut seen = std::collections::HashSet::with_capacity(class_ids.len());
        if let Some(dup) = class_ids.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(ShuntError::domain(format!("duplicate class id `{dup}`")));
        }
        Ok(Self { probs, class_ids })
    }

    /// Uniform distribution over `class_ids`.
    pub fn uniform(class_ids: Vec<ClassId>) -> Result<Self> {
        let n = class_ids.len();
        if n == 0 {
            return Err(ShuntError::domain("probability vector is empty"));
        }
        Self::new(vec![1.0 / n as f64; n], class_ids)
    }

    /// Scales non-negative weights to unit mass.
    pub fn from_weights(weights: Vec<f64>, class_ids: Vec<ClassId>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(ShuntError::domain(
                "weights must be non-negative with positive finite mass",
            ));
        }
        Self::new(weights.iter().map(|w| w / total).collect(), class_ids)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, class: &str) -> Option<f64> {
        self.class_ids.iter().position(|c| c == class).map(|i| self.probs[i])
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Predicted class (first class on ties).
    pub fn top_class(&self) -> &str {
        &self.class_ids[self.argmax()]
    }

    /// Largest component; the router's notion of "confidence".
    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    /// Gap between the two largest components (the top one for N = 1).
    pub fn margin(&self) -> f64 {
        let mut sorted = self.probs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[0] - sorted.get(1).copied().unwrap_or(0.0)
    }

    /// Distribution restricted to `classes`, renormalized, in the given order.
    pub fn restrict(&self, classes: &[ClassId]) -> Result<Self> {
        let weights = classes
            .iter()
            .map(|c| {
                self.get(c)
                    .ok_or_else(|| ShuntError::domain(format!("unknown class `{c}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_weights(weights, classes.to_vec())
    }
}

/// Joint probability mass over a finite |X| × |Y| alphabet, row-major in x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    rows: usize,
    cols: usize,
    table: Vec<f64>,
}

impl JointDistribution {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let rows = table.len();
        let cols = table.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(ShuntError::domain("joint table is empty"));
        }
        if table.iter().any(|r| r.len() != cols) {
            return Err(ShuntError::domain("joint table rows have unequal length"));
        }
        let flat: Vec<f64> = table.into_iter().flatten().collect();
        if flat.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ShuntError::domain("joint table has a negative or non-finite entry"));
        }
        let total: f64 = flat.iter().sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(ShuntError::domain(format!("joint mass is {total}, not 1")));
        }
        Ok(Self {
            rows,
            cols,
            table: flat,
        })
    }

    /// Outer product p(x)·p(y) of two marginals.
    pub fn product(px: &[f64], py: &[f64]) -> Result<Self> {
        Self::new(px.iter().map(|a| py.iter().map(|b| a * b).collect()).collect())
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.cols + y]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|x| (0..self.cols).map(|y| self.get(x, y)).sum())
            .collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|y| (0..self.rows).map(|x| self.get(x, y)).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub h_x: f64,
    pub h_x_given_y: f64,
    pub mutual_information: f64,
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &LogitVector, class_ids: Vec<ClassId>) -> Result<ProbabilityVector> {
    if class_ids.len() != logits.len() {
        return Err(ShuntError::domain(format!(
            "{} logits for {} classes",
            logits.len(),
            class_ids.len()
        )));
    }
    let probs = softmax_values(logits.values());
    ProbabilityVector::new(probs, class_ids)
}

/// Softmax over raw values, for callers that have already validated them.
pub fn softmax_values(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy −Σ p log p with 0·log 0 = 0.
pub fn entropy(p: &ProbabilityVector) -> f64 {
    entropy_of(p.probs())
}

fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

/// H(X), H(X|Y) and I(X;Y) by direct summation over the joint table.
pub fn conditional_entropy(joint: &JointDistribution) -> EntropyReport {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let h_x = entropy_of(&px);
    let (rows, cols) = joint.shape();
    // H(X|Y) = −Σ p(x,y) log(p(x,y)/p(y))
    let mut h_x_given_y = 0.0;
    for x in 0..rows {
        for (y, &p_y) in py.iter().enumerate().take(cols) {
            let pxy = joint.get(x, y);
            if pxy > 0.0 {
                h_x_given_y -= pxy * (pxy / p_y).ln();
            }
        }
    }
    // Rounding can push the conditional a hair past the marginal on
    // independent tables; conditioning never increases entropy.
    let h_x_given_y = h_x_given_y.clamp(0.0, h_x);
    EntropyReport {
        h_x,
        h_x_given_y,
        mutual_information: h_x - h_x_given_y,
    }
}

/// KL(p ∥ q) in nats.
///
/// Returns `f64::INFINITY` when p puts mass where q has none; callers treat
/// that as "skip this pair" rather than as an error.
pub fn kl_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(ShuntError::domain(format!(
            "kl_divergence over vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_values(p.probs(), q.probs()))
}

pub(crate) fn kl_values(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            total += pi * (pi / qi).ln();
        }
    }
    total.max(0.0)
}

/// Largest entropy any distribution over `n_candidates` classes can reach: log n.
pub fn max_entropy_bound(n_candidates: usize) -> Result<f64> {
    if n_candidates == 0 {
        return Err(ShuntError::domain("max_entropy_bound needs at least one candidate"));
    }
    Ok((n_candidates as f64).ln())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Class ids `c0, c1, …` for ad-hoc vectors.
pub fn indexed_classes(n: usize) -> Vec<ClassId> {
    (0..n).map(|i| format!("c{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(probs: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(probs.to_vec(), indexed_classes(probs.len())).unwrap()
    }

    fn sm(values: &[f64]) -> ProbabilityVector {
        softmax(
            &LogitVector::new(values.to_vec()).unwrap(),
            indexed_classes(values.len()),
        )
        .unwrap()
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let t: f64 = w.iter().sum();
        w.into_iter().map(|v| v / t).collect()
    }

    #[test]
    fn softmax_uniform_logits() {
        let p = sm(&[0.0, 0.0, 0.0]);
        for v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_reference_values() {
        // 40-digit reference: 1/(1+e), e/(1+e)
        let p = sm(&[1.0, 2.0]);
        assert!((p.probs()[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((p.probs()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = sm(&[1e300, 1e300, -1e300]);
        assert!((p.probs()[0] - 0.5).abs() < 1e-12);
        assert_eq!(p.probs()[2], 0.0);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(LogitVector::new(vec![]).is_err());
        assert!(LogitVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&pv(&[0.25; 4])) - 1.386_294_361_119_890_6).abs() < 1e-12);
        assert_eq!(entropy(&pv(&[1.0, 0.0, 0.0])), 0.0);
        assert!((entropy(&pv(&[0.5, 0.25, 0.25])) - 1.039_720_770_839_918).abs() < 1e-12);
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.4], indexed_classes(2)).is_err());
        assert!(ProbabilityVector::new(vec![1.0], indexed_classes(2)).is_err());
        assert!(ProbabilityVector::new(vec![1.5, -0.5], indexed_classes(2)).is_err());
        assert!(ProbabilityVector::new(vec![0.5, 0.5], vec!["a".into(), "a".into()]).is_err());
        assert!(serde_json::from_str::<ProbabilityVector>(r#"{"probs":[0.2,0.2],"class_ids":["a","b"]}"#).is_err());
    }

    #[test]
    fn conditional_entropy_product_table_is_independent() {
        let j = JointDistribution::product(&[0.2, 0.3, 0.5], &[0.6, 0.4]).unwrap();
        let r = conditional_entropy(&j);
        assert!((r.h_x_given_y - r.h_x).abs() < 1e-9);
        assert!(r.mutual_information.abs() < 1e-9);
    }

    #[test]
    fn conditional_entropy_diagonal_table() {
        let j = JointDistribution::new(vec![vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let r = conditional_entropy(&j);
        assert_eq!(r.h_x_given_y, 0.0);
        assert!((r.h_x - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn conditional_entropy_random_tables_match_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let flat = random_simplex(&mut rng, 9);
            let table: Vec<Vec<f64>> = flat.chunks(3).map(<[f64]>::to_vec).collect();
            let r = conditional_entropy(&JointDistribution::new(table.clone()).unwrap());
            // independent oracle: H(X|Y) = H(X,Y) − H(Y)
            let hxy: f64 = flat.iter().map(|p| -p * p.ln()).sum();
            let py: Vec<f64> = (0..3).map(|y| table.iter().map(|r| r[y]).sum()).collect();
            let hy: f64 = py.iter().map(|p| -p * p.ln()).sum();
            assert!((r.h_x_given_y - (hxy - hy)).abs() < 1e-9);
            assert!(r.h_x_given_y < r.h_x);
        }
    }

    #[test]
    fn joint_distribution_rejects_bad_mass() {
        assert!(JointDistribution::new(vec![vec![0.5, 0.4]]).is_err());
        assert!(JointDistribution::new(vec![vec![1.2, -0.2]]).is_err());
        assert!(JointDistribution::new(vec![vec![0.5], vec![0.25, 0.25]]).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[1.0, 0.0]);
        let q = pv(&[0.5, 0.5]);
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &p).unwrap(), f64::INFINITY);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&p, &pv(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn kl_gibbs_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.random_range(1..12);
            let p = pv(&random_simplex(&mut rng, n));
            let q = pv(&random_simplex(&mut rng, n));
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn max_entropy_bound_examples() {
        assert_eq!(max_entropy_bound(1).unwrap(), 0.0);
        assert!(max_entropy_bound(100).unwrap() > max_entropy_bound(10).unwrap());
        assert!(max_entropy_bound(0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            values in prop::collection::vec(-50.0f64..50.0, 1..16),
            shift in -1e3f64..1e3,
        ) {
            let a = sm(&values);
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let b = sm(&shifted);
            let total: f64 = a.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_preserves_argmax(values in prop::collection::vec(-50.0f64..50.0, 1..16)) {
            let logits = LogitVector::new(values.clone()).unwrap();
            prop_assert_eq!(sm(&values).argmax(), logits.argmax());
        }

        #[test]
        fn entropy_within_bounds(weights in prop::collection::vec(0.0f64..1.0, 1..20)) {
            prop_assume!(weights.iter().sum::<f64>() > 1e-6);
            let p = ProbabilityVector::from_weights(weights.clone(), indexed_classes(weights.len())).unwrap();
            let h = entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= max_entropy_bound(weights.len()).unwrap() + PROB_TOLERANCE);
        }

        #[test]
        fn kl_zero_iff_equal(weights in prop::collection::vec(0.01f64..1.0, 2..10), bump in 0.05f64..0.5) {
            let p = ProbabilityVector::from_weights(weights.clone(), indexed_classes(weights.len())).unwrap();
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            let mut other = weights.clone();
            other[0] += bump;
            let q = ProbabilityVector::from_weights(other, indexed_classes(weights.len())).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() > 0.0);
        }
    }
}
