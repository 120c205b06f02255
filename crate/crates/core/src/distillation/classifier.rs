use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backends::{ClassifyRequest, Dataset, ModelBackend, Payload, Prediction};
use crate::error::{Result, ShuntError};
use crate::prob::{argmax, ClassId, LogitVector, ProbabilityVector};
use crate::seed::rng_for;

/// Which side of the KL divergence the student sits on.
///
/// `StudentFirst` computes KL(student ∥ teacher), the literal argument order
/// of the two distillation losses. `TeacherFirst` is the conventional
/// KL(teacher ∥ student), which reduces to cross-entropy for one-hot teachers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    StudentFirst,
    TeacherFirst,
}

/// softmax(W·x + b) over a fixed class list.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxClassifier {
    pub(crate) name: String,
    pub(crate) classes: Vec<ClassId>,
    pub(crate) n_features: usize,
    /// Row-major, `classes.len() × n_features`.
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
    pub(crate) learning_rate: f64,
    pub(crate) seed: u64,
}

/// Gradient of a loss with respect to every parameter, same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGradient {
    pub fn flat(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }
}

impl LinearSoftmaxClassifier {
    /// Small Gaussian initialization drawn from `seed`.
    pub fn new(classes: Vec<ClassId>, n_features: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(classes, n_features, learning_rate, seed)?;
        let mut rng = rng_for(seed, "linear-softmax/init");
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        for w in &mut model.weights {
            *w = normal.sample(&mut rng);
        }
        Ok(model)
    }

    pub fn zeros(classes: Vec<ClassId>, n_features: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        if classes.is_empty() || n_features == 0 {
            return Err(ShuntError::domain(
                "classifier needs at least one class and one feature",
            ));
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(ShuntError::domain("learning rate must be positive and finite"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(c) = classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(ShuntError::domain(format!("duplicate class `{c}`")));
        }
        Ok(Self {
            name: "linear-softmax".into(),
            weights: vec![0.0; classes.len() * n_features],
            bias: vec![0.0; classes.len()],
            classes,
            n_features,
            learning_rate,
            seed,
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.classes == other.classes && self.n_features == other.n_features
    }

    /// True when every parameter has the same bit pattern.
    pub fn bit_identical(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.same_architecture(other)
            && bits(&self.weights) == bits(&other.weights)
            && bits(&self.bias) == bits(&other.bias)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(ShuntError::domain(format!(
                "expected {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn raw_logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.n_features)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<LogitVector> {
        self.check_input(x)?;
        LogitVector::new(self.raw_logits(x))
    }

    pub fn forward(&self, x: &[f64]) -> Result<ProbabilityVector> {
        let logits = self.logits(x)?;
        crate::prob::softmax(&logits, self.classes.clone())
    }

    pub fn predict(&self, x: &[f64]) -> Result<&ClassId> {
        self.check_input(x)?;
        Ok(&self.classes[argmax(&self.raw_logits(x))])
    }

    /// Distillation loss for one sample against a teacher over `classes()`.
    pub fn loss(&self, x: &[f64], teacher: &[f64], direction: KlDirection) -> Result<f64> {
        self.check_input(x)?;
        Ok(loss_from_logits(&self.raw_logits(x), teacher, direction).0)
    }

    /// Analytic gradient of [`loss`](Self::loss) with respect to W and b.
    pub fn gradient(&self, x: &[f64], teacher: &[f64], direction: KlDirection) -> Result<ParamGradient> {
        self.check_input(x)?;
        let (_, dz) = loss_from_logits(&self.raw_logits(x), teacher, direction);
        let mut weights = vec![0.0; self.weights.len()];
        for (row, g) in weights.chunks_exact_mut(self.n_features).zip(&dz) {
            for (w, v) in row.iter_mut().zip(x) {
                *w = g * v;
            }
        }
        Ok(ParamGradient { weights, bias: dz })
    }

    /// One gradient-descent step on the mean loss of `batch`.
    ///
    /// Pairs whose loss is infinite (teacher has zero mass where the student
    /// has some) are skipped. Returns the mean finite loss before the step
    /// and how many pairs contributed.
    pub fn step(&mut self, batch: &[(&[f64], &[f64])], direction: KlDirection) -> (f64, usize) {
        let mut grad_w = vec![0.0; self.weights.len()];
        let mut grad_b = vec![0.0; self.bias.len()];
        let mut total = 0.0;
        let mut used = 0usize;
        for (x, teacher) in batch {
            let (loss, dz) = loss_from_logits(&self.raw_logits(x), teacher, direction);
            if !loss.is_finite() {
                continue;
            }
            total += loss;
            used += 1;
            for ((row, g), gb) in grad_w.chunks_exact_mut(self.n_features).zip(&dz).zip(&mut grad_b) {
                *gb += g;
                for (w, v) in row.iter_mut().zip(x.iter()) {
                    *w += g * v;
                }
            }
        }
        if used == 0 {
            return (0.0, 0);
        }
        let scale = self.learning_rate / used as f64;
        for (w, g) in self.weights.iter_mut().zip(&grad_w) {
            *w -= scale * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad_b) {
            *b -= scale * g;
        }
        (total / used as f64, used)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// Supervised training on gold labels (cross-entropy, mini-batch GD).
    ///
    /// Samples without a gold label or with a label outside `classes()` are
    /// ignored. Returns the mean loss of the final epoch.
    pub fn fit(&mut self, data: &Dataset, epochs: usize, batch_size: usize) -> Result<f64> {
        let mut rows: Vec<(&[f64], Vec<f64>)> = Vec::new();
        for s in data {
            let x = s
                .payload
                .as_features()
                .ok_or_else(|| ShuntError::domain(format!("sample `{}` has no feature payload", s.id)))?;
            self.check_input(x)?;
            if let Some(k) = s
                .gold_label
                .as_ref()
                .and_then(|g| self.classes.iter().position(|c| c == g))
            {
                let mut one_hot = vec![0.0; self.classes.len()];
                one_hot[k] = 1.0;
                rows.push((x, one_hot));
            }
        }
        if rows.is_empty() {
            return Err(ShuntError::domain("no labelled samples to train on"));
        }
        let batch_size = batch_size.max(1);
        let mut rng = rng_for(self.seed, "linear-softmax/fit");
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut last = 0.0;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut count = 0usize;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<(&[f64], &[f64])> = chunk.iter().map(|&i| (rows[i].0, rows[i].1.as_slice())).collect();
                let (loss, used) = self.step(&batch, KlDirection::TeacherFirst);
                total += loss * used as f64;
                count += used;
            }
            last = total / count.max(1) as f64;
            if !last.is_finite() || !self.is_finite() {
                return Err(ShuntError::training(format!(
                    "supervised fit diverged at epoch {epoch}"
                )));
            }
        }
        Ok(last)
    }

    /// Fraction of labelled samples predicted correctly; `None` without labels.
    pub fn accuracy(&self, data: &Dataset) -> Result<Option<f64>> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in data {
            let Some(gold) = &s.gold_label else { continue };
            let x = s
                .payload
                .as_features()
                .ok_or_else(|| ShuntError::domain(format!("sample `{}` has no feature payload", s.id)))?;
            total += 1;
            if self.predict(x)? == gold {
                correct += 1;
            }
        }
        Ok((total > 0).then(|| correct as f64 / total as f64))
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Loss and its gradient with respect to the logits.
///
/// Student-first: L = Σ s ln(s/t), ∂L/∂z_j = s_j (a_j − Σ s_i a_i), a = ln s − ln t.
/// Teacher-first: L = Σ t ln(t/s), ∂L/∂z = s − t.
pub(crate) fn loss_from_logits(z: &[f64], teacher: &[f64], direction: KlDirection) -> (f64, Vec<f64>) {
    let log_s = log_softmax(z);
    let s: Vec<f64> = log_s.iter().map(|l| l.exp()).collect();
    match direction {
        KlDirection::StudentFirst => {
            if teacher.iter().zip(&s).any(|(t, si)| *t <= 0.0 && *si > 0.0) {
                return (f64::INFINITY, vec![0.0; z.len()]);
            }
            let a: Vec<f64> = log_s.iter().zip(teacher).map(|(ls, t)| ls - t.ln()).collect();
            let loss: f64 = s.iter().zip(&a).map(|(si, ai)| si * ai).sum();
            let grad = s.iter().zip(&a).map(|(sj, aj)| sj * (aj - loss)).collect();
            (loss.max(0.0), grad)
        }
        KlDirection::TeacherFirst => {
            let loss: f64 = teacher
                .iter()
                .zip(&log_s)
                .filter(|(t, _)| **t > 0.0)
                .map(|(t, ls)| t * (t.ln() - ls))
                .sum();
            let grad = s.iter().zip(teacher).map(|(si, t)| si - t).collect();
            (loss.max(0.0), grad)
        }
    }
}

impl ModelBackend for LinearSoftmaxClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, request: &ClassifyRequest<'_>) -> Result<Prediction> {
        let x = match &request.sample.payload {
            Payload::Features(f) => f,
            Payload::Text(_) => {
                return Err(ShuntError::domain(format!(
                    "backend `{}` needs a feature payload (sample `{}`)",
                    self.name, request.sample.id
                )))
            }
        };
        self.check_input(x)?;
        let z = self.raw_logits(x);
        let picked =
            request
                .candidates
                .iter()
                .map(|c| {
                    self.classes.iter().position(|k| k == c).map(|i| z[i]).ok_or_else(|| {
                        ShuntError::domain(format!("candidate `{c}` unknown to backend `{}`", self.name))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        let logits = LogitVector::new(picked)?;
        Ok(Prediction::free(crate::prob::softmax(
            &logits,
            request.candidates.to_vec(),
        )?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{classify, Sample};
    use crate::prob::indexed_classes;
    use rand::Rng;

    #[test]
    fn zero_weights_give_uniform() {
        let m = LinearSoftmaxClassifier::zeros(indexed_classes(2), 3, 0.1, 0).unwrap();
        let s = Sample::features("a", vec![1.0, -2.0, 3.0]);
        let p = classify(&m, &s, &indexed_classes(2), None).unwrap();
        assert_eq!(p.probs.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn classify_rejects_text_and_unknown_candidates() {
        let m = LinearSoftmaxClassifier::zeros(indexed_classes(2), 1, 0.1, 0).unwrap();
        assert!(classify(&m, &Sample::text("a", "hi"), &indexed_classes(2), None).is_err());
        let s = Sample::features("a", vec![1.0]);
        assert!(classify(&m, &s, &["nope".to_string()], None).is_err());
        assert!(classify(&m, &Sample::features("b", vec![1.0, 2.0]), &indexed_classes(2), None).is_err());
    }

    #[test]
    fn student_first_infinite_when_teacher_has_zeros() {
        let (loss, grad) = loss_from_logits(&[0.0, 0.0], &[1.0, 0.0], KlDirection::StudentFirst);
        assert_eq!(loss, f64::INFINITY);
        assert!(grad.iter().all(|g| *g == 0.0));
        let (loss, _) = loss_from_logits(&[0.0, 0.0], &[1.0, 0.0], KlDirection::TeacherFirst);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_for(1, "gradcheck-unit");
        for direction in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
            for _ in 0..20 {
                let k = rng.random_range(2..6);
                let f = rng.random_range(1..5);
                let mut m = LinearSoftmaxClassifier::new(indexed_classes(k), f, 0.1, rng.random()).unwrap();
                for w in &mut m.weights {
                    *w = rng.random_range(-1.0..1.0);
                }
                let x: Vec<f64> = (0..f).map(|_| rng.random_range(-2.0..2.0)).collect();
                let t: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                let sum: f64 = t.iter().sum();
                let t: Vec<f64> = t.iter().map(|v| v / sum).collect();
                let analytic = m.gradient(&x, &t, direction).unwrap().flat();
                let h = 1e-6;
                let mut numeric = Vec::new();
                for i in 0..m.parameter_count() {
                    let mut plus = m.clone();
                    let mut minus = m.clone();
                    nudge(&mut plus, i, h);
                    nudge(&mut minus, i, -h);
                    let d = plus.loss(&x, &t, direction).unwrap() - minus.loss(&x, &t, direction).unwrap();
                    numeric.push(d / (2.0 * h));
                }
                let diff: f64 = analytic
                    .iter()
                    .zip(&numeric)
                    .map(|(a, n)| (a - n).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                assert!(diff / norm < 1e-5, "{direction:?}: rel err {}", diff / norm);
            }
        }
    }

    fn nudge(m: &mut LinearSoftmaxClassifier, i: usize, h: f64) {
        if i < m.weights.len() {
            m.weights[i] += h;
        } else {
            m.bias[i - m.weights.len()] += h;
        }
    }

    #[test]
    fn fit_learns_separable_data() {
        let samples: Vec<Sample> = (0..200)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                Sample::features(format!("s{i}"), vec![sign * 2.0 + (i as f64 * 0.01).sin(), 1.0])
                    .with_gold(if i % 2 == 0 { "c0" } else { "c1" })
            })
            .collect();
        let data = Dataset::new(samples).unwrap();
        let mut m = LinearSoftmaxClassifier::new(indexed_classes(2), 2, 0.5, 3).unwrap();
        m.fit(&data, 30, 16).unwrap();
        assert_eq!(m.accuracy(&data).unwrap(), Some(1.0));
    }
}
