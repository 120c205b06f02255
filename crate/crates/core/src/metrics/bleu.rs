use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShuntError};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuLevel {
    Corpus,
    Sentence,
}

/// Cumulative BLEU-1..max_n with a shared brevity penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// `bleu[k]` is BLEU-(k+1).
    pub bleu: Vec<f64>,
    /// Clipped n-gram precision per order.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Arithmetic mean of `bleu`.
    pub mean: f64,
    /// Some order exceeded the hypothesis length and scored 0.
    pub short: bool,
    pub level: BleuLevel,
}

impl BleuScore {
    pub fn bleu_n(&self, n: usize) -> Option<f64> {
        n.checked_sub(1).and_then(|i| self.bleu.get(i).copied())
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sums clipped matches and lengths over many sentence pairs.
#[derive(Debug, Clone)]
pub struct BleuAccumulator {
    max_n: usize,
    matched: [u64; MAX_ORDER],
    total: [u64; MAX_ORDER],
    hyp_len: u64,
    ref_len: u64,
    short: bool,
    sentences: usize,
}

impl BleuAccumulator {
    pub fn new(max_n: usize) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&max_n) {
            return Err(ShuntError::domain(format!(
                "max_n must be in 1..={MAX_ORDER}, got {max_n}"
            )));
        }
        Ok(Self {
            max_n,
            matched: [0; MAX_ORDER],
            total: [0; MAX_ORDER],
            hyp_len: 0,
            ref_len: 0,
            short: false,
            sentences: 0,
        })
    }

    pub fn add(&mut self, hypothesis: &[&str], references: &[Vec<&str>]) -> Result<()> {
        if hypothesis.is_empty() {
            return Err(ShuntError::domain("empty BLEU hypothesis"));
        }
        if references.is_empty() {
            return Err(ShuntError::domain("BLEU needs at least one reference"));
        }
        let c = hypothesis.len();
        for n in 1..=self.max_n {
            let hyp = ngram_counts(hypothesis, n);
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in references {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            let matched: usize = hyp
                .iter()
                .map(|(g, k)| (*k).min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            self.matched[n - 1] += matched as u64;
            self.total[n - 1] += c.saturating_sub(n - 1) as u64;
            if n > c {
                self.short = true;
            }
        }
        // Closest reference length; ties go to the shorter one.
        let r = references
            .iter()
            .map(Vec::len)
            .min_by_key(|&len| (len.abs_diff(c), len))
            .expect("non-empty references");
        self.hyp_len += c as u64;
        self.ref_len += r as u64;
        self.sentences += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<BleuScore> {
        if self.sentences == 0 {
            return Err(ShuntError::domain("no sentences scored"));
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let brevity_penalty = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        let precisions: Vec<f64> = (0..self.max_n)
            .map(|i| {
                if self.total[i] == 0 {
                    0.0
                } else {
                    self.matched[i] as f64 / self.total[i] as f64
                }
            })
            .collect();
        let mut log_sum = 0.0;
        let bleu: Vec<f64> = precisions
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                log_sum += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
                if log_sum == f64::NEG_INFINITY {
                    0.0
                } else {
                    brevity_penalty * (log_sum / (i + 1) as f64).exp()
                }
            })
            .collect();
        let mean = bleu.iter().sum::<f64>() / bleu.len() as f64;
        Ok(BleuScore {
            bleu,
            precisions,
            brevity_penalty,
            mean,
            short: self.short,
            level: if self.sentences == 1 {
                BleuLevel::Sentence
            } else {
                BleuLevel::Corpus
            },
        })
    }
}

/// BLEU of one hypothesis against its references.
pub fn bleu(hypothesis: &[&str], references: &[Vec<&str>], max_n: usize) -> Result<BleuScore> {
    let mut acc = BleuAccumulator::new(max_n)?;
    acc.add(hypothesis, references)?;
    acc.finish()
}

/// Corpus-level BLEU over `(hypothesis, references)` pairs of whitespace-tokenized text.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(S, Vec<S>)], max_n: usize) -> Result<BleuScore> {
    let mut acc = BleuAccumulator::new(max_n)?;
    for (h, refs) in pairs {
        let hyp: Vec<&str> = h.as_ref().split_whitespace().collect();
        let refs: Vec<Vec<&str>> = refs.iter().map(|r| r.as_ref().split_whitespace().collect()).collect();
        acc.add(&hyp, &refs)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_scores_one() {
        let h = toks("a man rides a red bicycle down the hill");
        let b = bleu(&h, std::slice::from_ref(&h), 4).unwrap();
        assert!(b.bleu.iter().all(|&v| v == 1.0));
        assert_eq!(b.mean, 1.0);
        assert!(!b.short);
    }

    #[test]
    fn clipping_fixture() {
        let b = bleu(&toks("the the the the"), &[toks("the cat")], 1).unwrap();
        assert_eq!(b.precisions[0], 0.25);
        assert_eq!(b.brevity_penalty, 1.0);
        assert_eq!(b.bleu[0], 0.25);
    }

    #[test]
    fn brevity_fixture() {
        let b = bleu(&toks("a b"), &[toks("a b c d")], 1).unwrap();
        assert!((b.bleu[0] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((b.bleu[0] - 0.36787944117144233).abs() < 1e-9);
    }

    #[test]
    fn short_hypothesis_flags_missing_orders() {
        let b = bleu(&toks("a b"), &[toks("a b")], 4).unwrap();
        assert!(b.short);
        assert_eq!(b.bleu[0], 1.0);
        assert_eq!(b.bleu[1], 1.0);
        assert_eq!(b.bleu[2], 0.0);
        assert_eq!(b.bleu[3], 0.0);
        assert_eq!(b.mean, 0.5);
    }

    #[test]
    fn errors() {
        assert!(bleu(&[], &[toks("a")], 1).is_err());
        assert!(bleu(&toks("a"), &[], 1).is_err());
        assert!(bleu(&toks("a"), &[toks("a")], 5).is_err());
        assert!(bleu(&toks("a"), &[toks("a")], 0).is_err());
    }

    #[test]
    fn corpus_pools_counts() {
        let pairs = vec![("a b c d", vec!["a b c d"]), ("x y", vec!["a b"])];
        let b = corpus_bleu(&pairs, 1).unwrap();
        assert_eq!(b.level, BleuLevel::Corpus);
        assert!((b.precisions[0] - 4.0 / 6.0).abs() < 1e-15);
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from),
            1..25,
        )
    }

    proptest! {
        #[test]
        fn reference_order_does_not_matter(h in words(), r1 in words(), r2 in words()) {
            let h: Vec<&str> = h.iter().map(String::as_str).collect();
            let r1: Vec<&str> = r1.iter().map(String::as_str).collect();
            let r2: Vec<&str> = r2.iter().map(String::as_str).collect();
            let a = bleu(&h, &[r1.clone(), r2.clone()], 4).unwrap();
            let b = bleu(&h, &[r2, r1], 4).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scores_bounded_and_non_increasing_in_n(h in words(), r in words()) {
            let h: Vec<&str> = h.iter().map(String::as_str).collect();
            let r: Vec<&str> = r.iter().map(String::as_str).collect();
            let s = bleu(&h, &[r], 4).unwrap();
            for v in &s.bleu {
                prop_assert!((0.0..=1.0).contains(v));
            }
            for w in s.bleu.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", s.bleu);
            }
            prop_assert!((s.mean - s.bleu.iter().sum::<f64>() / 4.0).abs() < 1e-9);
        }
    }
}
