//! Corpus BLEU and style-marker accuracy.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use memplug::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU-4 on token sequences, scaled to [0, 100].
///
/// Unigram precision is unsmoothed; orders 2–4 use `(m + 1) / (t + 1)`.
/// Brevity penalty `exp(1 − r/c)` applies when the hypothesis corpus is
/// shorter than the reference corpus.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Contract("BLEU needs at least one reference".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..MAX_ORDER {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_p / MAX_ORDER as f64).exp())
}

/// BLEU over whitespace-separated strings.
pub fn bleu_str(hypotheses: &[&str], references: &[&str]) -> Result<f64> {
    let split = |s: &[&str]| -> Vec<Vec<String>> {
        s.iter().map(|x| x.split_whitespace().map(str::to_string).collect()).collect()
    };
    bleu(&split(hypotheses), &split(references))
}

/// Among reference positions holding a style-marked token, the fraction whose
/// hypothesis token at the same position is style-marked too. Each pair is
/// compared up to the shorter of its two lengths. 0 when no compared position
/// carries a style token.
pub fn style_marker_accuracy<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], styled: &HashSet<T>) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        for (x, t) in h.iter().zip(r) {
            if styled.contains(t) {
                total += 1;
                if styled.contains(x) {
                    hits += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
