//! Perplexity, ROUGE-1/2/L and token-level precision/recall/F1.
//!
//! Scores are on a 0 to 100 scale. Any empty side scores 0. Corpus-level
//! scores are micro-averaged (overlap and length counts are summed over
//! examples before dividing), so every reported F1 is exactly the harmonic
//! mean of the reported precision and recall.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Raw overlap counts, summable across examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub overlap: usize,
    pub candidate: usize,
    pub reference: usize,
}

impl OverlapCounts {
    pub fn add(&mut self, other: OverlapCounts) {
        self.overlap += other.overlap;
        self.candidate += other.candidate;
        self.reference += other.reference;
    }

    pub fn prf(&self) -> Prf {
        if self.candidate == 0 || self.reference == 0 {
            return Prf::default();
        }
        let precision = 100.0 * self.overlap as f64 / self.candidate as f64;
        let recall = 100.0 * self.overlap as f64 / self.reference as f64;
        Prf {
            precision,
            recall,
            f1: harmonic_mean(precision, recall),
        }
    }
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn counts<T: Eq + Hash>(items: impl Iterator<Item = T>) -> HashMap<T, usize> {
    let mut map = HashMap::new();
    for x in items {
        *map.entry(x).or_insert(0) += 1;
    }
    map
}

/// Size of the clipped multiset intersection.
fn clipped_overlap<T: Eq + Hash>(cand: &HashMap<T, usize>, reference: &HashMap<T, usize>) -> usize {
    cand.iter()
        .map(|(k, &c)| c.min(reference.get(k).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge_n_counts<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> OverlapCounts {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let cand = counts(candidate.windows(n));
    let refs = counts(reference.windows(n));
    OverlapCounts {
        overlap: clipped_overlap(&cand, &refs),
        candidate: candidate.len().saturating_sub(n - 1),
        reference: reference.len().saturating_sub(n - 1),
    }
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Prf {
    rouge_n_counts(candidate, reference, n).prf()
}

/// Length of the longest common subsequence, by dynamic programming over
/// two rolling rows.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_counts<T: Eq>(candidate: &[T], reference: &[T]) -> OverlapCounts {
    OverlapCounts {
        overlap: lcs_len(candidate, reference),
        candidate: candidate.len(),
        reference: reference.len(),
    }
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Prf {
    rouge_l_counts(candidate, reference).prf()
}

pub fn token_prf_counts<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> OverlapCounts {
    OverlapCounts {
        overlap: clipped_overlap(&counts(candidate.iter()), &counts(reference.iter())),
        candidate: candidate.len(),
        reference: reference.len(),
    }
}

pub fn token_prf<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Prf {
    token_prf_counts(candidate, reference).prf()
}

/// Word-level normalization for ROUGE: lowercase, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// `exp` of a token-weighted mean cross-entropy.
pub fn perplexity(total_ce: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::contract("perplexity of an empty evaluation stream"));
    }
    Ok((total_ce / tokens as f64).exp())
}

/// Running corpus-level sums for every overlap metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OverlapTotals {
    pub rouge1: OverlapCounts,
    pub rouge2: OverlapCounts,
    pub rouge_l: OverlapCounts,
    pub tokens: OverlapCounts,
}

impl OverlapTotals {
    /// Adds one (candidate, reference) pair of normalized words.
    pub fn add_words<T: Eq + Hash>(&mut self, candidate: &[T], reference: &[T]) {
        self.rouge1.add(rouge_n_counts(candidate, reference, 1));
        self.rouge2.add(rouge_n_counts(candidate, reference, 2));
        self.rouge_l.add(rouge_l_counts(candidate, reference));
        self.tokens.add(token_prf_counts(candidate, reference));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub perplexity: f64,
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
    pub token_precision: f64,
    pub token_recall: f64,
    pub token_f1: f64,
    /// Whether the token-level scores compare teacher-forced next-token
    /// predictions (true) or generated summaries (false) with the reference.
    pub teacher_forced: bool,
    pub examples: usize,
    pub scored_tokens: usize,
}

impl MetricsReport {
    pub fn new(
        perplexity: f64,
        words: &OverlapTotals,
        tokens: Prf,
        teacher_forced: bool,
        examples: usize,
        scored_tokens: usize,
    ) -> Self {
        Self {
            perplexity,
            rouge1: words.rouge1.prf(),
            rouge2: words.rouge2.prf(),
            rouge_l: words.rouge_l.prf(),
            token_precision: tokens.precision,
            token_recall: tokens.recall,
            token_f1: tokens.f1,
            teacher_forced,
            examples,
            scored_tokens,
        }
    }

    /// Plain-text table; every value printed with two decimals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<12} {:>10} {:>10} {:>10}\n",
            "metric", "precision", "recall", "f1"
        ));
        for (name, m) in [
            ("rouge1", &self.rouge1),
            ("rouge2", &self.rouge2),
            ("rougeL", &self.rouge_l),
        ] {
            s.push_str(&format!(
                "{name:<12} {:>10.2} {:>10.2} {:>10.2}\n",
                m.precision, m.recall, m.f1
            ));
        }
        s.push_str(&format!(
            "{:<12} {:>10.2} {:>10.2} {:>10.2}\n",
            "token", self.token_precision, self.token_recall, self.token_f1
        ));
        s.push_str(&format!("perplexity   {:.4}\n", self.perplexity));
        s.push_str(&format!(
            "examples     {}  scored_tokens {}  teacher_forced {}\n",
            self.examples, self.scored_tokens, self.teacher_forced
        ));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report is serializable")
    }
}
