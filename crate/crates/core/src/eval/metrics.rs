use std::collections::HashMap;
use std::hash::Hash;

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LenUnit {
    Chars,
    /// Whitespace-separated tokens.
    Tokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

pub fn whitespace_tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// `len(pred) - len(ref)` in the given unit.
pub fn delta_len(pred: &str, reference: &str, unit: LenUnit) -> i64 {
    let len = |s: &str| match unit {
        LenUnit::Chars => s.chars().count(),
        LenUnit::Tokens => s.split_whitespace().count(),
    } as i64;
    len(pred) - len(reference)
}

fn ngram_counts<T: Hash + Eq + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and the totals on each side.
fn clipped_matches<T: Hash + Eq + Clone>(pred: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let p = ngram_counts(pred, n);
    let r = ngram_counts(reference, n);
    let m = p.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (m, pred.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

fn f1(matches: usize, pred_total: usize, ref_total: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / pred_total as f64;
    let r = matches as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// Character n-gram F1 averaged over orders 1..=3 that the reference has.
pub fn chrf(pred: &str, reference: &str) -> Result<f64, EvalError> {
    let p: Vec<char> = pred.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(EvalError::Contract("chrf reference is empty".into()));
    }
    let orders = r.len().min(3);
    let total: f64 = (1..=orders)
        .map(|n| {
            let (m, pt, rt) = clipped_matches(&p, &r, n);
            f1(m, pt, rt)
        })
        .sum();
    Ok(total / orders as f64)
}

/// Unit-cost character edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence BLEU without smoothing. Orders the reference is too short to
/// have are left out of the geometric mean.
pub fn bleu(pred: &[&str], reference: &[&str], max_n: usize) -> Result<f64, EvalError> {
    if !(1..=4).contains(&max_n) {
        return Err(EvalError::Contract(format!("bleu max_n must be in 1..=4, got {max_n}")));
    }
    if pred.is_empty() || reference.is_empty() {
        return Ok(0.0);
    }
    let orders = reference.len().min(max_n);
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let (m, pt, _) = clipped_matches(pred, reference, n);
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / pt as f64).ln();
    }
    let bp = if pred.len() < reference.len() { (1.0 - reference.len() as f64 / pred.len() as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / orders as f64).exp())
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F1. When the reference has no n-grams of the variant's order, the
/// score is 1 for an identical prediction and 0 otherwise.
pub fn rouge(pred: &[&str], reference: &[&str], variant: RougeVariant) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    match variant {
        RougeVariant::R1 | RougeVariant::R2 => {
            let n = if variant == RougeVariant::R1 { 1 } else { 2 };
            let (m, pt, rt) = clipped_matches(pred, reference, n);
            if rt == 0 {
                return if pred == reference { 1.0 } else { 0.0 };
            }
            f1(m, pt, rt)
        }
        RougeVariant::RL => f1(lcs_len(pred, reference), pred.len(), reference.len()),
    }
}
