//! Sequence-level evaluation metrics.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::vocab::Token;

fn check_lists(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Config(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Fraction of hypotheses identical to their reference.
pub fn exact_match(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
    check_lists(hyps, refs)?;
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hyps.len() as f64)
}

/// Position-wise agreement, normalized by the longer of each pair.
pub fn token_accuracy(hyps: &[Vec<Token>], refs: &[Vec<Token>]) -> Result<f64> {
    check_lists(hyps, refs)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

fn ngrams(s: &[Token], n: usize) -> HashMap<&[Token], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in `[0, 1]`: clipped n-gram precisions up to `max_n`, summed
/// over the corpus, geometric mean, brevity penalty. Unsmoothed, so any zero
/// precision gives 0.
pub fn corpus_bleu(hyps: &[Vec<Token>], refs: &[Vec<Token>], max_n: usize) -> Result<f64> {
    check_lists(hyps, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&possible)
        .map(|(&m, &p)| (m as f64 / p as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}
