use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{config, Result};

/// Low-resource fractions and length-bucket count for evaluation harnesses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub fractions: Vec<f64>,
    pub n_buckets: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: vec![1.0 / 16.0, 0.25, 0.5, 1.0],
            n_buckets: 4,
        }
    }
}

/// Nested subsets of `corpus`, one per fraction, each holding
/// `round(fraction · N)` items in original corpus order.
pub fn low_resource_splits(corpus: &Corpus, fractions: &[f64], seed: u64) -> Result<Vec<Corpus>> {
    for (i, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f <= 1.0) {
            return Err(config(format!("fraction {f} outside (0, 1]")));
        }
        if i > 0 && f < fractions[i - 1] {
            return Err(config("fractions must be ascending"));
        }
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(fractions
        .iter()
        .map(|&f| {
            let m = (f * corpus.len() as f64).round() as usize;
            let mut chosen = order[..m].to_vec();
            chosen.sort_unstable();
            corpus.subset(&chosen)
        })
        .collect())
}

fn length_range(corpus: &Corpus) -> (usize, usize) {
    let lens = corpus.items.iter().map(|u| u.source.len());
    (lens.clone().min().unwrap_or(0), lens.max().unwrap_or(0))
}

/// Index of the equal-width bucket over `[min, max]` a length falls into.
pub fn bucket_index(len: usize, min: usize, max: usize, n_buckets: usize) -> usize {
    if max == min || n_buckets <= 1 {
        return 0;
    }
    let width = (max - min) as f64 / n_buckets as f64;
    (((len - min) as f64 / width) as usize).min(n_buckets - 1)
}

/// `[lo, hi)` source-length edges of each bucket (the last one closed).
pub fn bucket_edges(corpus: &Corpus, n_buckets: usize) -> Vec<(f64, f64)> {
    let (min, max) = length_range(corpus);
    let width = (max - min) as f64 / n_buckets.max(1) as f64;
    (0..n_buckets)
        .map(|b| (min as f64 + b as f64 * width, min as f64 + (b + 1) as f64 * width))
        .collect()
}

/// Partitions `corpus` by source length into `n_buckets` equal-width buckets
/// covering `[min, max]`. With all lengths equal everything lands in bucket 0.
pub fn bucket_by_length(corpus: &Corpus, n_buckets: usize) -> Vec<Corpus> {
    let n_buckets = n_buckets.max(1);
    let (min, max) = length_range(corpus);
    let mut out = vec![Corpus::default(); n_buckets];
    for u in &corpus.items {
        out[bucket_index(u.source.len(), min, max, n_buckets)].items.push(u.clone());
    }
    out
}
