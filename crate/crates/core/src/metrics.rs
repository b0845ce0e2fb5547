//! Corpus-level BLEU, chrF and WER.
//!
//! BLEU tokenization splits on whitespace and detaches every punctuation
//! character as its own token; case is kept. chrF removes all whitespace
//! before extracting character n-grams, sums statistics over the corpus,
//! and averages per-order F-scores over the orders for which both sides
//! have n-grams. WER lower-cases, drops punctuation, and divides total
//! word edits by total reference words.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BleuConfig {
    pub max_order: usize,
    pub lowercase: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChrfConfig {
    pub char_order: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WerConfig {
    pub lowercase: bool,
    pub strip_punct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub bleu: BleuConfig,
    pub chrf: ChrfConfig,
    pub wer: WerConfig,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_order: 4,
            lowercase: false,
        }
    }
}

impl Default for ChrfConfig {
    fn default() -> Self {
        ChrfConfig {
            char_order: 6,
            beta: 2.0,
        }
    }
}

impl Default for WerConfig {
    fn default() -> Self {
        WerConfig {
            lowercase: true,
            strip_punct: true,
        }
    }
}

/// One emitted score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub split: String,
    pub value: f64,
}

fn check_pair(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(contract("metric needs at least one item"));
    }
    Ok(())
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

pub fn tokenize_13a(s: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(s.len() * 2);
    for c in s.chars() {
        if is_punct(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts<T: Eq + Hash + Clone>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(matches, hyp total, ref total)` of one n-gram order for one pair.
fn overlap<T: Eq + Hash + Clone>(hyp: &[T], r: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let rc = ngram_counts(r, n);
    let matches = h.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
    (matches, h.values().sum(), rc.values().sum())
}

/// Corpus BLEU statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precisions(&self) -> Vec<f64> {
        self.matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
            .collect()
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Unsmoothed score: zero whenever any order has no matches or no n-grams.
    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.iter().any(|&x| x == 0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / p.len() as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

pub fn bleu_stats(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>], cfg: &BleuConfig) -> Result<BleuStats> {
    check_pair(hyps, refs)?;
    let prep = |s: &str| {
        if cfg.lowercase {
            tokenize_13a(&s.to_lowercase())
        } else {
            tokenize_13a(s)
        }
    };
    let mut st = BleuStats {
        matches: vec![0; cfg.max_order],
        totals: vec![0; cfg.max_order],
        hyp_len: 0,
        ref_len: 0,
    };
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (prep(h.as_ref()), prep(r.as_ref()));
        st.hyp_len += h.len();
        st.ref_len += r.len();
        for n in 1..=cfg.max_order {
            let (m, t, _) = overlap(&h, &r, n);
            st.matches[n - 1] += m;
            st.totals[n - 1] += t;
        }
    }
    Ok(st)
}

pub fn bleu(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>], cfg: &BleuConfig) -> Result<f64> {
    Ok(bleu_stats(hyps, refs, cfg)?.score())
}

pub fn chrf(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>], cfg: &ChrfConfig) -> Result<f64> {
    check_pair(hyps, refs)?;
    let chars = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<Vec<char>>();
    let mut stats = vec![(0usize, 0usize, 0usize); cfg.char_order];
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (chars(h.as_ref()), chars(r.as_ref()));
        for n in 1..=cfg.char_order {
            let (m, th, tr) = overlap(&h, &r, n);
            let s = &mut stats[n - 1];
            s.0 += m;
            s.1 += th;
            s.2 += tr;
        }
    }
    let b2 = cfg.beta * cfg.beta;
    let mut total = 0.0;
    let mut effective = 0;
    for &(m, th, tr) in &stats {
        if th == 0 || tr == 0 {
            continue;
        }
        effective += 1;
        let (p, r) = (m as f64 / th as f64, m as f64 / tr as f64);
        if p + r > 0.0 {
            total += (1.0 + b2) * p * r / (b2 * p + r);
        }
    }
    if effective == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * total / effective as f64)
}

/// chrF with the default β = 2 and character order 6.
pub fn chrf2(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<f64> {
    chrf(hyps, refs, &ChrfConfig::default())
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>], cfg: &WerConfig) -> Result<f64> {
    check_pair(hyps, refs)?;
    let norm = |s: &str| -> Vec<String> {
        let s = if cfg.lowercase { s.to_lowercase() } else { s.to_string() };
        let s: String = if cfg.strip_punct {
            s.chars().filter(|&c| !is_punct(c)).collect()
        } else {
            s
        };
        s.split_whitespace().map(str::to_string).collect()
    };
    let (mut edits, mut words) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (norm(h.as_ref()), norm(r.as_ref()));
        edits += levenshtein(&h, &r);
        words += r.len();
    }
    if words == 0 {
        return Err(contract("reference corpus has no words"));
    }
    Ok(edits as f64 / words as f64)
}
