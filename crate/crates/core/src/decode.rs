//! Greedy and beam search over an arbitrary next-token scorer.
//!
//! The scorer receives, for each row, the item it belongs to and the prefix
//! decoded so far (starting with BOS), and returns next-token logits.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{config, contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_len: usize,
    #[serde(default = "default_eos")]
    pub eos: usize,
}

fn default_eos() -> usize {
    EOS
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_len: 80,
            eos: EOS,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Strategy::Beam { width: 0 } = self.strategy {
            return Err(config("beam width must be >= 1"));
        }
        if self.max_len == 0 {
            return Err(config("max_len must be >= 1"));
        }
        Ok(())
    }
}

/// Decoded tokens without BOS/EOS. `unterminated` marks output cut at `max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub unterminated: bool,
    pub score: f64,
}

/// `(row item indices, row prefixes) -> per-row logits`.
pub trait Scorer: FnMut(&[usize], &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {}
impl<F: FnMut(&[usize], &[Vec<usize>]) -> Result<Vec<Vec<f32>>>> Scorer for F {}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x as f64 - lse).collect()
}

fn checked(out: Vec<Vec<f32>>, rows: usize) -> Result<Vec<Vec<f32>>> {
    if out.len() != rows {
        return Err(contract(format!("scorer returned {} rows for {rows}", out.len())));
    }
    Ok(out)
}

pub fn decode<F: Scorer>(n_items: usize, cfg: &DecodeConfig, scorer: F) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy(n_items, cfg, scorer),
        Strategy::Beam { width } => {
            let mut scorer = scorer;
            (0..n_items).map(|i| beam(i, width, cfg, &mut scorer)).collect()
        }
    }
}

fn greedy<F: Scorer>(n_items: usize, cfg: &DecodeConfig, mut scorer: F) -> Result<Vec<Hypothesis>> {
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; n_items];
    let mut scores = vec![0.0; n_items];
    let mut done = vec![false; n_items];
    for _ in 0..cfg.max_len {
        let rows: Vec<usize> = (0..n_items).filter(|&i| !done[i]).collect();
        if rows.is_empty() {
            break;
        }
        let row_prefixes: Vec<Vec<usize>> = rows.iter().map(|&i| prefixes[i].clone()).collect();
        let logits = checked(scorer(&rows, &row_prefixes)?, rows.len())?;
        for (&i, l) in rows.iter().zip(&logits) {
            let lp = log_softmax(l);
            let best = (0..lp.len()).fold(0, |b, t| if lp[t] > lp[b] { t } else { b });
            scores[i] += lp[best];
            prefixes[i].push(best);
            if best == cfg.eos {
                done[i] = true;
            }
        }
    }
    Ok(prefixes
        .into_iter()
        .zip(done)
        .zip(scores)
        .map(|((p, d), s)| finish(p, !d, s, cfg.eos))
        .collect())
}

fn finish(prefix: Vec<usize>, unterminated: bool, score: f64, eos: usize) -> Hypothesis {
    let mut tokens = prefix[1..].to_vec();
    if tokens.last() == Some(&eos) {
        tokens.pop();
    }
    Hypothesis {
        tokens,
        unterminated,
        score,
    }
}

/// Length-normalised beam search: hypotheses compete on summed log-probability
/// divided by generated length (EOS included). Each step keeps the `width`
/// best expansions; those ending in EOS retire.
fn beam<F: Scorer>(item: usize, width: usize, cfg: &DecodeConfig, scorer: &mut F) -> Result<Hypothesis> {
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let rows = vec![item; live.len()];
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let logits = checked(scorer(&rows, &prefixes)?, rows.len())?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, l) in logits.iter().enumerate() {
            for (t, lp) in log_softmax(l).into_iter().enumerate() {
                cands.push((live[b].1 + lp, b, t));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut next = Vec::new();
        for &(s, b, t) in cands.iter().take(width) {
            let mut p = live[b].0.clone();
            p.push(t);
            if t == cfg.eos {
                finished.push((p, s));
            } else {
                next.push((p, s));
            }
        }
        live = next;
    }
    let norm = |(p, s): &(Vec<usize>, f64)| s / (p.len() - 1) as f64;
    let pick = |pool: &[(Vec<usize>, f64)]| {
        pool.iter()
            .enumerate()
            .max_by(|a, b| norm(a.1).total_cmp(&norm(b.1)).then(b.0.cmp(&a.0)))
            .map(|(_, h)| h.clone())
    };
    Ok(match pick(&finished) {
        Some((p, s)) => finish(p, false, s, cfg.eos),
        None => {
            let (p, s) = pick(&live).expect("max_len >= 1 leaves a live beam");
            finish(p, true, s, cfg.eos)
        }
    })
}
