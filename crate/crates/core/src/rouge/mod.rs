//! ROUGE-1, ROUGE-2 and ROUGE-L over lowercase alphanumeric tokens.
//!
//! No stemming, no stopword removal, and ROUGE-L is taken over the whole
//! text as a single sequence.

mod report;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domain::RougeScore;

pub use report::{
    aggregate, format_table, load_answers, load_dataset, run_benchmark, stable_mean, write_item_scores, AnswerRecord,
    BenchError, BenchOutcome, ItemScores,
};

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap on pre-tokenized sequences.
pub fn rouge_n_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched: usize = cand.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    RougeScore::from_pr(ratio(matched, cand_total), ratio(matched, ref_total))
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    rouge_n_tokens(&tokenize(candidate), &tokenize(reference), n)
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> RougeScore {
    let l = lcs_len(candidate, reference);
    RougeScore::from_pr(ratio(l, candidate.len()), ratio(l, reference.len()))
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// The three metrics reported for one answer (or averaged over many).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricScores {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    #[serde(rename = "rougeL")]
    pub rouge_l: RougeScore,
}

impl MetricScores {
    pub fn score(candidate: &str, reference: &str) -> Self {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        Self { rouge1: rouge_n_tokens(&c, &r, 1), rouge2: rouge_n_tokens(&c, &r, 2), rouge_l: rouge_l_tokens(&c, &r) }
    }

    /// The nine numbers in table order: R1 P/R/F1, R2 P/R/F1, RL P/R/F1.
    pub fn as_array(&self) -> [f64; 9] {
        let [a, b, c] = [self.rouge1, self.rouge2, self.rouge_l];
        [a.precision, a.recall, a.f1, b.precision, b.recall, b.f1, c.precision, c.recall, c.f1]
    }

    pub fn from_array(v: [f64; 9]) -> Self {
        let s = |p, r, f| RougeScore { precision: p, recall: r, f1: f };
        Self { rouge1: s(v[0], v[1], v[2]), rouge2: s(v[3], v[4], v[5]), rouge_l: s(v[6], v[7], v[8]) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Yes, many countries offer"), vec!["yes", "many", "countries", "offer"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("e-mail 2FA!"), vec!["e", "mail", "2fa"]);
    }

    #[test]
    fn hand_bigram_case() {
        let s = rouge_n("the cat sat", "the cat ran fast", 2);
        assert!((s.precision - 0.5).abs() < 1e-15);
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn lcs_case() {
        let s = rouge_l("a b c d", "a c b d");
        assert_eq!(s, RougeScore { precision: 0.75, recall: 0.75, f1: 0.75 });
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(rouge_n("", "a b", 1), RougeScore::ZERO);
        assert_eq!(rouge_l("a b", ""), RougeScore::ZERO);
        assert_eq!(rouge_n("a", "a", 2), RougeScore::ZERO);
        let id = rouge_n("same words here", "same words here", 1);
        assert_eq!((id.precision, id.recall, id.f1), (1.0, 1.0, 1.0));
        assert_eq!(rouge_n("x y", "a b", 1), RougeScore::ZERO);
    }

    #[test]
    fn clipping() {
        // candidate repeats "the" three times, reference has it twice
        let s = rouge_n("the the the", "the cat the", 1);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
    }
}
