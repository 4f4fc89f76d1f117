//! BLEU@4 with clipped n-gram precisions, no smoothing, and the brevity
//! penalty `exp(1 − r/c)` when the candidate is shorter than the reference.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};
use crate::heads::{BOS, EOS, PAD};

const MAX_N: usize = 4;

/// Clipped matches and candidate n-gram totals for n = 1..=4, plus the
/// candidate and effective reference lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Stats {
    matches: [usize; MAX_N],
    totals: [usize; MAX_N],
    hyp_len: usize,
    ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn stats<T: Eq + Hash>(hyp: &[T], refs: &[Vec<T>]) -> Result<Stats> {
    if refs.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut s = Stats {
        hyp_len: hyp.len(),
        ..Stats::default()
    };
    // Closest reference length; ties go to the shorter one.
    s.ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        .unwrap_or(0);
    for n in 1..=MAX_N {
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.matches[n - 1] = h.iter().map(|(g, c)| (*c).min(*max_ref.get(g).unwrap_or(&0))).sum();
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    Ok(s)
}

fn score(s: &Stats) -> f64 {
    if s.hyp_len == 0 || s.matches.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (s.matches[i] as f64 / s.totals[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if s.hyp_len < s.ref_len {
        (1.0 - s.ref_len as f64 / s.hyp_len as f64).exp()
    } else {
        1.0
    };
    bp * log_p.exp()
}

pub fn sentence_bleu4<T: Eq + Hash>(hyp: &[T], refs: &[Vec<T>]) -> Result<f64> {
    Ok(score(&stats(hyp, refs)?))
}

/// Corpus BLEU: n-gram matches, totals and lengths are summed over all
/// segments before the precisions are formed.
pub fn corpus_bleu4<T: Eq + Hash>(segments: &[(Vec<T>, Vec<Vec<T>>)]) -> Result<f64> {
    if segments.is_empty() {
        return Err(Error::EmptyReference);
    }
    let mut total = Stats::default();
    for (hyp, refs) in segments {
        let s = stats(hyp, refs)?;
        for i in 0..MAX_N {
            total.matches[i] += s.matches[i];
            total.totals[i] += s.totals[i];
        }
        total.hyp_len += s.hyp_len;
        total.ref_len += s.ref_len;
    }
    Ok(score(&total))
}

/// Drops PAD, BOS and EOS before scoring.
pub fn strip_specials(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| t != PAD && t != BOS && t != EOS).collect()
}
