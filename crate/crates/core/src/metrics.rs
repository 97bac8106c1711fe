//! Report-generation text metrics: cumulative BLEU-1..4 and ROUGE-L.
//!
//! Tokenisation is lowercase, punctuation replaced by spaces, whitespace
//! split. Scores are therefore only qualitatively comparable with numbers
//! produced by other tokenisers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// Cumulative BLEU-1..`max_n`, each ×100. Zero whenever any precision
    /// up to that order is zero (no smoothing).
    pub fn scores(&self, max_n: usize) -> Vec<f64> {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else if c == 0.0 { 0.0 } else { (1.0 - r / c).exp() };
        let mut log_sum = 0.0;
        let mut dead = false;
        (1..=max_n)
            .map(|n| {
                let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
                if m == 0 || t == 0 {
                    dead = true;
                }
                if dead {
                    return 0.0;
                }
                log_sum += (m as f64 / t as f64).ln();
                100.0 * bp * (log_sum / n as f64).exp()
            })
            .collect()
    }
}

/// Clipped n-gram matches against multiple references. The reference length
/// is the one closest to the candidate length (shorter on ties).
pub fn bleu_stats<T: AsRef<str>, U: AsRef<str>>(candidate: &[T], references: &[Vec<U>]) -> Result<BleuStats> {
    if candidate.is_empty() {
        return Err(Error::EmptyInput("BLEU candidate"));
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("BLEU references"));
    }
    let mut stats = BleuStats {
        candidate_len: candidate.len(),
        ..BleuStats::default()
    };
    stats.reference_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| ((l as i64 - candidate.len() as i64).abs(), l))
        .unwrap();
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        for (gram, &count) in &cand {
            let max_ref = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
            stats.matches[n - 1] += count.min(max_ref);
        }
        stats.totals[n - 1] = candidate.len().saturating_sub(n - 1);
    }
    Ok(stats)
}

/// Cumulative BLEU-1..`max_n` (×100) for one candidate.
pub fn bleu<T: AsRef<str>, U: AsRef<str>>(candidate: &[T], references: &[Vec<U>], max_n: usize) -> Result<Vec<f64>> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidParameter(format!("max_n must be 1..=4, got {max_n}")));
    }
    Ok(bleu_stats(candidate, references)?.scores(max_n))
}

/// Corpus BLEU: statistics are summed over all pairs before scoring.
pub fn corpus_bleu<T: AsRef<str>, U: AsRef<str>>(pairs: &[(Vec<T>, Vec<Vec<U>>)], max_n: usize) -> Result<Vec<f64>> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::InvalidParameter(format!("max_n must be 1..=4, got {max_n}")));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("BLEU corpus"));
    }
    let mut total = BleuStats::default();
    for (c, r) in pairs {
        total.add(&bleu_stats(c, r)?);
    }
    Ok(total.scores(max_n))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// LCS-based F-measure `(1+β²)PR / (R + β²P)`.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T], beta: f64) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("ROUGE-L sequence"));
    }
    let c: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * rec / (rec + b2 * p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Corpus BLEU over line-aligned candidate/reference texts and mean
/// sentence ROUGE-L.
pub fn evaluate_texts(candidates: &[String], references: &[String], beta: f64) -> Result<TextMetricReport> {
    if candidates.len() != references.len() {
        return Err(Error::shape("metric inputs", candidates.len(), references.len()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput("metric inputs"));
    }
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| (tokenize(c), vec![tokenize(r)]))
        .collect();
    let b = corpus_bleu(&pairs, 4)?;
    let mut rouge = 0.0;
    for (c, r) in &pairs {
        rouge += rouge_l(c, &r[0], beta)?;
    }
    Ok(TextMetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge / pairs.len() as f64,
    })
}
