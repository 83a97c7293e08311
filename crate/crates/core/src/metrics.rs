//! Sentence-level text metrics: BLEU-4, ROUGE-L and token F1.
//!
//! Inputs are word sequences. Corpus scores are means of sentence scores.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 with clipped n-gram precisions, uniform weights, no smoothing and
/// the standard brevity penalty.
pub fn bleu4<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / 4.0).exp()
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
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

fn f_measure(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-L F-measure.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    f_measure(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// F1 over token multisets.
pub fn token_f1<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut refc: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *refc.entry(t.as_ref()).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in candidate {
        if let Some(c) = refc.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f_measure(overlap, candidate.len(), reference.len())
}

/// The three metrics for one candidate, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub f1: f64,
}

impl Scores {
    pub fn compute(candidate: &str, reference: &str) -> Self {
        let c: Vec<&str> = candidate.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        Scores { bleu4: bleu4(&c, &r), rouge_l: rouge_l(&c, &r), f1: token_f1(&c, &r) }
    }

    pub fn mean<'a, I: IntoIterator<Item = &'a Scores>>(items: I) -> Self {
        let mut n = 0usize;
        let mut acc = Scores::default();
        for s in items {
            acc.bleu4 += s.bleu4;
            acc.rouge_l += s.rouge_l;
            acc.f1 += s.f1;
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        let n = n as f64;
        Scores { bleu4: acc.bleu4 / n, rouge_l: acc.rouge_l / n, f1: acc.f1 / n }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_scores_one() {
        let s = w("the cat sat on the mat");
        assert_eq!(bleu4(&s, &s), 1.0);
        assert_eq!(rouge_l(&s, &s), 1.0);
        assert_eq!(token_f1(&s, &s), 1.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        let (a, b) = (w("a b c d"), w("e f g h"));
        assert_eq!(bleu4(&a, &b), 0.0);
        assert_eq!(rouge_l(&a, &b), 0.0);
        assert_eq!(token_f1(&a, &b), 0.0);
    }

    #[test]
    fn no_shared_fourgram_is_zero() {
        assert_eq!(bleu4(&w("a b c x d"), &w("a b c d")), 0.0);
    }

    #[test]
    fn short_candidate_is_zero() {
        assert_eq!(bleu4(&w("a b c"), &w("a b c")), 0.0);
    }

    #[test]
    fn rouge_transposition() {
        assert_eq!(lcs_len(&w("a b c d"), &w("a c b d")), 3);
        assert!((rouge_l(&w("a b c d"), &w("a c b d")) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn token_f1_multiset() {
        assert!((token_f1(&w("a a b"), &w("a b b")) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs() {
        let e: Vec<&str> = vec![];
        assert_eq!(bleu4(&e, &w("a")), 0.0);
        assert_eq!(rouge_l(&w("a"), &e), 0.0);
        assert_eq!(token_f1(&e, &e), 0.0);
    }

    #[test]
    fn mean_of_scores() {
        let a = Scores { bleu4: 1.0, rouge_l: 0.5, f1: 0.0 };
        let b = Scores { bleu4: 0.0, rouge_l: 0.5, f1: 1.0 };
        assert_eq!(Scores::mean([&a, &b]), Scores { bleu4: 0.5, rouge_l: 0.5, f1: 0.5 });
    }
}
