//! Unsmoothed BLEU with a length-aware variant for short answers.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BleuError {
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("reference is empty")]
    EmptyReference,
    #[error("n-gram weights must be non-empty, non-negative and sum to 1 (got {0:?})")]
    BadWeights(Vec<f64>),
}

fn ngram_counts<'a, T: AsRef<str>>(tokens: &'a [T], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision: candidate n-gram counts clipped by their
/// reference counts. Zero when the candidate has no n-grams of this order.
pub fn modified_precision<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    let cand = ngram_counts(candidate, n);
    let total: usize = cand.values().sum();
    if total == 0 {
        return 0.0;
    }
    let refs = ngram_counts(reference, n);
    let clipped: usize = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / total as f64
}

pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// `BP * exp(sum_n w_n log p_n)`. Orders with zero weight are skipped; a
/// zero precision at any weighted order makes the whole score zero.
pub fn bleu<T: AsRef<str>>(candidate: &[T], reference: &[T], weights: &[f64]) -> Result<f64, BleuError> {
    if candidate.is_empty() {
        return Err(BleuError::EmptyCandidate);
    }
    if reference.is_empty() {
        return Err(BleuError::EmptyReference);
    }
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(BleuError::BadWeights(weights.to_vec()));
    }
    let mut log_sum = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let p = modified_precision(candidate, reference, i + 1);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += w * p.ln();
    }
    let score = brevity_penalty(candidate.len(), reference.len()) * log_sum.exp();
    Ok(score.clamp(0.0, 1.0))
}

/// Uniform weights over orders `1..=min(4, candidate length)`.
pub fn short_form_weights(candidate_len: usize) -> Vec<f64> {
    let max_n = candidate_len.clamp(1, 4);
    vec![1.0 / max_n as f64; max_n]
}

/// BLEU whose maximum n-gram order shrinks to the candidate length, so an
/// exact match of a short answer scores 1.
pub fn short_form_bleu<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> Result<f64, BleuError> {
    if candidate.is_empty() {
        return Err(BleuError::EmptyCandidate);
    }
    bleu(candidate, reference, &short_form_weights(candidate.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent n-gram counter: enumerates every candidate position and
    /// greedily consumes matching reference positions.
    fn oracle_precision(c: &[&str], r: &[&str], n: usize) -> Option<(usize, usize)> {
        if c.len() < n {
            return None;
        }
        let mut used = vec![false; r.len().saturating_sub(n - 1)];
        let mut hits = 0;
        for i in 0..=c.len() - n {
            for (j, slot) in used.iter_mut().enumerate() {
                if !*slot && c[i..i + n] == r[j..j + n] {
                    *slot = true;
                    hits += 1;
                    break;
                }
            }
        }
        Some((hits, c.len() - n + 1))
    }

    #[test]
    fn oracle_three_token_case() {
        let c = ["a", "b", "c"];
        let r = ["a", "b", "d"];
        assert_eq!(oracle_precision(&c, &r, 1), Some((2, 3)));
        assert_eq!(oracle_precision(&c, &r, 2), Some((1, 2)));
        assert_eq!(oracle_precision(&c, &r, 3), Some((0, 1)));
        assert_eq!(modified_precision(&c, &r, 1), 2.0 / 3.0);
        assert_eq!(modified_precision(&c, &r, 2), 0.5);
        assert_eq!(modified_precision(&c, &r, 3), 0.0);
        assert_eq!(short_form_bleu(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn exact_match_long_is_one() {
        let x = ["the", "cat", "sat", "on", "the", "mat"];
        assert_eq!(bleu(&x, &x, &[0.25; 4]).unwrap(), 1.0);
    }

    #[test]
    fn standard_bleu_penalises_short_exact_match() {
        let x = ["the", "cat"];
        assert!(bleu(&x, &x, &[0.25; 4]).unwrap() < 1.0);
        assert_eq!(short_form_bleu(&x, &x).unwrap(), 1.0);
        assert_eq!(short_form_bleu(&["Paris"], &["Paris"]).unwrap(), 1.0);
    }

    #[test]
    fn brevity_penalty_branches() {
        assert_eq!(brevity_penalty(5, 3), 1.0);
        assert_eq!(brevity_penalty(3, 3), 1.0);
        assert!((brevity_penalty(1, 2) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn clipping_of_repeated_tokens() {
        let c = ["the", "the", "the", "the"];
        let r = ["the", "cat"];
        assert_eq!(modified_precision(&c, &r, 1), 0.25);
        assert_eq!(oracle_precision(&c, &r, 1), Some((1, 4)));
    }

    #[test]
    fn error_paths() {
        let e: [&str; 0] = [];
        assert_eq!(bleu(&e, &["a"], &[1.0]), Err(BleuError::EmptyCandidate));
        assert_eq!(bleu(&["a"], &e, &[1.0]), Err(BleuError::EmptyReference));
        assert!(matches!(bleu(&["a"], &["a"], &[0.5]), Err(BleuError::BadWeights(_))));
        assert!(matches!(bleu(&["a"], &["a"], &[]), Err(BleuError::BadWeights(_))));
        assert_eq!(short_form_bleu(&e, &["a"]), Err(BleuError::EmptyCandidate));
    }

    fn oracle_bleu(c: &[&str], r: &[&str], weights: &[f64]) -> f64 {
        let mut log_sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            match oracle_precision(c, r, i + 1) {
                Some((hits, total)) if hits > 0 => log_sum += w * (hits as f64 / total as f64).ln(),
                _ => return 0.0,
            }
        }
        let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
        bp * log_sum.exp()
    }

    fn tokens() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from), 1..9)
    }

    proptest! {
        #[test]
        fn agrees_with_oracle(c in tokens(), r in tokens()) {
            let c: Vec<&str> = c.iter().map(String::as_str).collect();
            let r: Vec<&str> = r.iter().map(String::as_str).collect();
            let w = short_form_weights(c.len());
            let got = short_form_bleu(&c, &r).unwrap();
            prop_assert!((got - oracle_bleu(&c, &r, &w)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
            let std4 = bleu(&c, &r, &[0.25; 4]).unwrap();
            prop_assert!((0.0..=1.0).contains(&std4));
        }
    }
}
