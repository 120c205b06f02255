use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::template::{Slot, Template};
use crate::backends::{classify, Dataset, ModelBackend, Tokenizer, WhitespaceTokenizer};
use crate::error::{Result, ShuntError};
use crate::prob::{ClassId, ProbabilityVector};

pub const DEFAULT_ANNOTATION: &str = "{label} with probability {confidence}";
pub const DEFAULT_PROFICIENCY_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Soft,
    Hard,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub template: String,
    pub rendered: String,
    pub mode: PromptMode,
    /// Raw small-model confidences that were rendered into the prompt.
    pub injected_confidences: BTreeMap<ClassId, f64>,
    pub pruned_candidates: Vec<ClassId>,
    /// Candidates the large model is asked to choose from.
    pub candidates: Vec<ClassId>,
    pub token_count_in: usize,
    pub token_count_out: usize,
    /// Hard pruning that removed nothing.
    #[serde(default)]
    pub no_op: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProficiencyRule {
    TopKByValidationAccuracy { k: usize },
    AccuracyAbove { threshold: f64 },
}

impl Default for ProficiencyRule {
    fn default() -> Self {
        ProficiencyRule::AccuracyAbove {
            threshold: DEFAULT_PROFICIENCY_THRESHOLD,
        }
    }
}

/// Classes the small model is reliable on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProficiencySet {
    pub classes: BTreeSet<ClassId>,
    #[serde(default)]
    pub rule: Option<ProficiencyRule>,
}

impl ProficiencySet {
    pub fn explicit<I, S>(classes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<ClassId>,
    {
        Self {
            classes: classes.into_iter().map(Into::into).collect(),
            rule: None,
        }
    }

    /// Applies `rule` to per-class validation accuracies.
    ///
    /// Top-k breaks accuracy ties by class id.
    pub fn from_accuracies(accuracies: &BTreeMap<ClassId, f64>, rule: ProficiencyRule) -> Self {
        let classes = match rule {
            ProficiencyRule::AccuracyAbove { threshold } => accuracies
                .iter()
                .filter(|(_, a)| **a > threshold)
                .map(|(c, _)| c.clone())
                .collect(),
            ProficiencyRule::TopKByValidationAccuracy { k } => {
                let mut ranked: Vec<(&ClassId, f64)> = accuracies.iter().map(|(c, a)| (c, *a)).collect();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                ranked.into_iter().take(k).map(|(c, _)| c.clone()).collect()
            }
        };
        Self {
            classes,
            rule: Some(rule),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: &str) -> bool {
        self.classes.contains(class)
    }
}

/// Per-gold-class accuracy of `backend` on `data`.
///
/// With `min_confidence`, a correct prediction only counts when its top
/// probability is strictly above that value.
pub fn per_class_accuracy(
    data: &Dataset,
    backend: &dyn ModelBackend,
    candidates: &[ClassId],
    min_confidence: Option<f64>,
) -> Result<BTreeMap<ClassId, f64>> {
    let mut tally: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for s in data {
        let Some(gold) = &s.gold_label else { continue };
        let p = classify(backend, s, candidates, None)?.probs;
        let hit = p.top_class() == gold && min_confidence.is_none_or(|m| p.max_prob() > m);
        let e = tally.entry(gold.clone()).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect())
}

/// Two decimals, ties to even on the exact binary value.
pub fn format_confidence(c: f64) -> String {
    format!("{c:.2}")
}

/// Renders prune-mode prompts from a base template.
///
/// The base template may only use `{candidates}`; the annotation template
/// renders one proficient class and must use `{label}`.
#[derive(Clone)]
pub struct PromptBuilder {
    base: Template,
    annotation: Template,
    tokenizer: Arc<dyn Tokenizer>,
}

impl std::fmt::Debug for PromptBuilder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptBuilder")
            .field("base", &self.base)
            .field("annotation", &self.annotation)
            .finish()
    }
}

impl PromptBuilder {
    pub fn new(base: Template) -> Result<Self> {
        Self::with_annotation(base, Template::parse(DEFAULT_ANNOTATION)?)
    }

    pub fn with_annotation(base: Template, annotation: Template) -> Result<Self> {
        base.expect_slots(&[Slot::Candidates], "base")?;
        annotation.expect_slots(&[Slot::Label, Slot::Confidence], "annotation")?;
        if !annotation.has_slot(Slot::Label) {
            return Err(ShuntError::domain("annotation template must use `{label}`"));
        }
        Ok(Self {
            base,
            annotation,
            tokenizer: Arc::new(WhitespaceTokenizer),
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    fn render_base(&self, listed: &[String]) -> Result<String> {
        if self.base.has_slot(Slot::Candidates) {
            self.base.render_one(Slot::Candidates, &listed.join(", "))
        } else {
            self.base.render(&BTreeMap::new())
        }
    }

    /// Prompt with every candidate listed plainly; the no-pruning baseline.
    pub fn plain(&self, candidates: &[ClassId]) -> Result<String> {
        self.render_base(candidates)
    }

    /// Annotates proficient classes with the small model's confidence.
    pub fn soft(&self, c_s: &ProbabilityVector, proficient: &ProficiencySet) -> Result<PromptRecord> {
        let candidates = c_s.class_ids().to_vec();
        if let Some(c) = proficient.classes.iter().find(|c| c_s.get(c).is_none()) {
            return Err(ShuntError::domain(format!(
                "proficient class `{c}` missing from the small-model distribution"
            )));
        }
        if !proficient.is_empty() && !self.base.has_slot(Slot::Candidates) {
            return Err(ShuntError::domain(
                "base template has no `{candidates}` slot to annotate",
            ));
        }
        let mut injected = BTreeMap::new();
        let mut listed = Vec::with_capacity(candidates.len());
        for (class, p) in candidates.iter().zip(c_s.probs()) {
            if proficient.contains(class) {
                injected.insert(class.clone(), *p);
                listed.push(self.annotation.render(&BTreeMap::from([
                    (Slot::Label, class.clone()),
                    (Slot::Confidence, format_confidence(*p)),
                ]))?);
            } else {
                listed.push(class.clone());
            }
        }
        let rendered = self.render_base(&listed)?;
        Ok(PromptRecord {
            template: self.base.source().to_string(),
            token_count_in: self.tokenizer.count(&self.plain(&candidates)?),
            token_count_out: self.tokenizer.count(&rendered),
            rendered,
            mode: PromptMode::Soft,
            injected_confidences: injected,
            pruned_candidates: Vec::new(),
            candidates,
            no_op: false,
        })
    }

    /// Removes proficient classes from the candidate list.
    pub fn hard(
        &self,
        _c_s: &ProbabilityVector,
        proficient: &ProficiencySet,
        candidates: &[ClassId],
    ) -> Result<PromptRecord> {
        let (pruned, surviving): (Vec<ClassId>, Vec<ClassId>) =
            candidates.iter().cloned().partition(|c| proficient.contains(c));
        if surviving.is_empty() {
            return Err(ShuntError::domain("hard pruning would remove every candidate"));
        }
        let rendered = self.render_base(&surviving)?;
        Ok(PromptRecord {
            template: self.base.source().to_string(),
            token_count_in: self.tokenizer.count(&self.plain(candidates)?),
            token_count_out: self.tokenizer.count(&rendered),
            rendered,
            mode: PromptMode::Hard,
            injected_confidences: BTreeMap::new(),
            no_op: pruned.is_empty(),
            pruned_candidates: pruned,
            candidates: surviving,
        })
    }
}

pub fn build_soft_prompt(
    base: &Template,
    c_s: &ProbabilityVector,
    proficient: &ProficiencySet,
) -> Result<PromptRecord> {
    PromptBuilder::new(base.clone())?.soft(c_s, proficient)
}

pub fn build_hard_prompt(
    base: &Template,
    c_s: &ProbabilityVector,
    proficient: &ProficiencySet,
    candidates: &[ClassId],
) -> Result<PromptRecord> {
    PromptBuilder::new(base.clone())?.hard(c_s, proficient, candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{indexed_classes, max_entropy_bound};
    use proptest::prelude::*;

    fn animals() -> ProbabilityVector {
        ProbabilityVector::new(vec![0.10, 0.60, 0.30], vec!["cat".into(), "dog".into(), "tiger".into()]).unwrap()
    }

    fn base() -> Template {
        Template::parse("Which animal is in the photo? Options: {candidates}.").unwrap()
    }

    #[test]
    fn soft_prompt_annotates_only_proficient() {
        let rec = build_soft_prompt(&base(), &animals(), &ProficiencySet::explicit(["cat"])).unwrap();
        assert!(rec.rendered.contains("cat with probability 0.10"));
        assert!(rec.rendered.contains("dog, tiger"));
        assert!(!rec.rendered.contains("0.60"));
        assert_eq!(rec.injected_confidences.len(), 1);
        assert_eq!(rec.candidates.len(), 3);
        assert_eq!(rec.mode, PromptMode::Soft);
    }

    #[test]
    fn soft_prompt_with_empty_set_is_identity() {
        let builder = PromptBuilder::new(base()).unwrap();
        let rec = builder.soft(&animals(), &ProficiencySet::default()).unwrap();
        assert_eq!(rec.rendered, builder.plain(animals().class_ids()).unwrap());
        assert_eq!(rec.token_count_in, rec.token_count_out);

        let fixed = Template::parse("Classify this photo.").unwrap();
        let rec = build_soft_prompt(&fixed, &animals(), &ProficiencySet::default()).unwrap();
        assert_eq!(rec.rendered, "Classify this photo.");
    }

    #[test]
    fn soft_prompt_errors() {
        let missing = ProficiencySet::explicit(["wolf"]);
        assert!(build_soft_prompt(&base(), &animals(), &missing).is_err());
        let fixed = Template::parse("no slot").unwrap();
        assert!(build_soft_prompt(&fixed, &animals(), &ProficiencySet::explicit(["cat"])).is_err());
        let bad = Template::parse("{label}").unwrap();
        assert!(PromptBuilder::new(bad).is_err());
    }

    #[test]
    fn confidence_formatting() {
        assert_eq!(format_confidence(1.0 / 3.0), "0.33");
        assert_eq!(format_confidence(0.125), "0.12");
        assert_eq!(format_confidence(0.375), "0.38");
        assert_eq!(format_confidence(1.0), "1.00");
        for c in [0.0, 0.004999, 0.255, 0.5, 0.999] {
            let s = format_confidence(c);
            let back: f64 = s.parse().unwrap();
            assert_eq!(format_confidence(back), s);
        }
    }

    #[test]
    fn hard_prompt_shrinks_candidates() {
        let candidates = indexed_classes(100);
        let proficient = ProficiencySet::explicit(candidates[..30].iter().cloned());
        let c_s = ProbabilityVector::uniform(candidates.clone()).unwrap();
        let rec = build_hard_prompt(&base(), &c_s, &proficient, &candidates).unwrap();
        assert_eq!(rec.candidates.len(), 70);
        assert_eq!(rec.pruned_candidates.len(), 30);
        assert!(max_entropy_bound(70).unwrap() < max_entropy_bound(100).unwrap());
        assert!(rec.token_count_out < rec.token_count_in);
    }

    #[test]
    fn hard_prompt_disjoint_set_is_no_op() {
        let rec = build_hard_prompt(
            &base(),
            &animals(),
            &ProficiencySet::explicit(["wolf"]),
            animals().class_ids(),
        )
        .unwrap();
        assert!(rec.no_op);
        assert_eq!(rec.candidates, animals().class_ids());
    }

    #[test]
    fn hard_prompt_cannot_empty_candidates() {
        let all = ProficiencySet::explicit(["cat", "dog", "tiger"]);
        assert!(build_hard_prompt(&base(), &animals(), &all, animals().class_ids()).is_err());
    }

    #[test]
    fn proficiency_rules() {
        let acc = BTreeMap::from([
            ("a".to_string(), 0.99),
            ("b".to_string(), 0.80),
            ("c".to_string(), 0.96),
            ("d".to_string(), 0.96),
        ]);
        let above = ProficiencySet::from_accuracies(&acc, ProficiencyRule::default());
        assert_eq!(above.classes, BTreeSet::from(["a".into(), "c".into(), "d".into()]));
        let top = ProficiencySet::from_accuracies(&acc, ProficiencyRule::TopKByValidationAccuracy { k: 2 });
        assert_eq!(top.classes, BTreeSet::from(["a".into(), "c".into()]));
    }

    proptest! {
        #[test]
        fn hard_pruning_partitions_candidates(
            n in 2usize..40,
            mask in prop::collection::vec(any::<bool>(), 40),
        ) {
            let candidates = indexed_classes(n);
            let proficient = ProficiencySet::explicit(
                candidates.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| c.clone()),
            );
            prop_assume!(candidates.iter().any(|c| !proficient.contains(c)));
            let c_s = ProbabilityVector::uniform(candidates.clone()).unwrap();
            let rec = build_hard_prompt(&base(), &c_s, &proficient, &candidates).unwrap();
            let pruned: BTreeSet<_> = rec.pruned_candidates.iter().collect();
            let kept: BTreeSet<_> = rec.candidates.iter().collect();
            prop_assert!(pruned.is_disjoint(&kept));
            prop_assert_eq!(pruned.len() + kept.len(), n);
            prop_assert_eq!(rec.candidates.len(), n - rec.pruned_candidates.len());
        }
    }
}
