use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// First id of a content token; ids below are reserved specials.
pub const FIRST_TOKEN: usize = 3;

/// The synthetic translation rule and its acoustic rendering.
///
/// Source and target share the same id layout: specials, then `vocab`
/// content tokens. Translation maps each source token through a fixed
/// permutation and swaps adjacent pairs starting at even positions. Frames
/// render each source token as a fixed signature held for
/// `frames_per_token` frames plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub vocab: usize,
    pub frames_per_token: usize,
    pub frame_dim: usize,
    pub signature_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab: 32,
            frames_per_token: 8,
            frame_dim: 16,
            signature_dim: 8,
            noise: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    cfg: TaskConfig,
    map: Vec<usize>,
    signatures: Vec<Vec<f32>>,
}

/// How utterance lengths (in source tokens) are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthDist {
    Uniform,
    /// Exponentially decaying mass over the range: short items dominate and
    /// the longest length is about 50× rarer than the shortest.
    LongTail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    /// `[n_frames, frame_dim]`
    pub frames: Tensor<f32>,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Per-frame generating source token; frames are spread evenly over tokens.
    pub fn frame_labels(&self) -> Vec<usize> {
        let n = self.n_frames();
        let len = self.source.len();
        (0..n).map(|i| self.source[i * len / n]).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub items: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

impl ToyTask {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        if cfg.vocab < 2 || cfg.frames_per_token == 0 || cfg.frame_dim == 0 || cfg.signature_dim == 0 {
            return Err(config("task needs vocab >= 2 and positive frame geometry"));
        }
        if !(cfg.noise >= 0.0) {
            return Err(config("noise must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut map: Vec<usize> = (0..cfg.vocab).collect();
        map.shuffle(&mut rng);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let table: Vec<Vec<f64>> = (0..cfg.vocab)
            .map(|_| (0..cfg.signature_dim).map(|_| unit.sample(&mut rng)).collect())
            .collect();
        let scale = 1.0 / (cfg.signature_dim as f64).sqrt();
        let proj: Vec<Vec<f64>> = (0..cfg.signature_dim)
            .map(|_| (0..cfg.frame_dim).map(|_| unit.sample(&mut rng) * scale).collect())
            .collect();
        let signatures = table
            .iter()
            .map(|row| {
                (0..cfg.frame_dim)
                    .map(|j| row.iter().zip(&proj).map(|(&e, p)| e * p[j]).sum::<f64>() as f32)
                    .collect()
            })
            .collect();
        Ok(ToyTask {
            cfg,
            map,
            signatures,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    /// Total id space of source (and target) tokens, specials included.
    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab + FIRST_TOKEN
    }

    pub fn map_token(&self, id: usize) -> usize {
        FIRST_TOKEN + self.map[id - FIRST_TOKEN]
    }

    /// The generating rule: token map, then swap of each `(2i, 2i+1)` pair.
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = source.iter().map(|&t| self.map_token(t)).collect();
        for pair in out.chunks_exact_mut(2) {
            pair.swap(0, 1);
        }
        out
    }

    /// Inverse of [`ToyTask::translate`].
    pub fn untranslate(&self, target: &[usize]) -> Vec<usize> {
        let mut inv = vec![0; self.cfg.vocab];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        let mut out: Vec<usize> = target.iter().map(|&t| FIRST_TOKEN + inv[t - FIRST_TOKEN]).collect();
        for pair in out.chunks_exact_mut(2) {
            pair.swap(0, 1);
        }
        out
    }

    pub fn signature(&self, token: usize) -> &[f32] {
        &self.signatures[token - FIRST_TOKEN]
    }

    pub fn render<R: Rng>(&self, source: &[usize], rng: &mut R) -> Tensor<f32> {
        let f = self.cfg.frames_per_token;
        let d = self.cfg.frame_dim;
        let noise = Normal::new(0.0, self.cfg.noise.max(f64::MIN_POSITIVE)).expect("noise");
        let mut data = Vec::with_capacity(source.len() * f * d);
        for &tok in source {
            let sig = self.signature(tok);
            for _ in 0..f {
                for &s in sig {
                    let n = if self.cfg.noise > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                    data.push(s + n);
                }
            }
        }
        Tensor::new(vec![source.len() * f, d], data).expect("frame shape")
    }

    /// Seed-deterministic corpus of `n_items` utterances with source lengths
    /// drawn from `lengths` (inclusive).
    pub fn generate(&self, n_items: usize, seed: u64, lengths: (usize, usize), dist: LengthDist) -> Result<Corpus> {
        let (lo, hi) = lengths;
        if lo == 0 || lo > hi || hi > 64 {
            return Err(config(format!("length range [{lo}, {hi}] must be non-empty within [1, 64]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (lo..=hi)
            .map(|l| match dist {
                LengthDist::Uniform => 1.0,
                LengthDist::LongTail => {
                    let span = (hi - lo).max(1) as f64;
                    (-4.0 * (l - lo) as f64 / span).exp()
                }
            })
            .collect();
        let lens = rand_distr::WeightedIndex::new(&weights).expect("positive weights");
        let items = (0..n_items)
            .map(|id| {
                let len = lo + lens.sample(&mut rng);
                let source: Vec<usize> = (0..len).map(|_| FIRST_TOKEN + rng.gen_range(0..self.cfg.vocab)).collect();
                let target = self.translate(&source);
                let frames = self.render(&source, &mut rng);
                Utterance {
                    id,
                    frames,
                    source,
                    target,
                }
            })
            .collect();
        Ok(Corpus { items })
    }

    /// Renders tokens as whitespace-separated words for text metrics.
    pub fn detokenize(tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= FIRST_TOKEN)
            .map(|&t| format!("w{}", t - FIRST_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Frame repeat/drop stand-in for speed perturbation: a factor above 1
/// shortens the utterance, below 1 lengthens it.
pub fn speed_perturb(utt: &Utterance, factor: f64) -> Utterance {
    if factor == 1.0 {
        return utt.clone();
    }
    let n = utt.n_frames();
    let d = utt.frames.shape()[1];
    let new_n = ((n as f64 / factor).round() as usize).max(utt.source.len());
    let mut data = Vec::with_capacity(new_n * d);
    for j in 0..new_n {
        let src = ((j as f64 * factor) as usize).min(n - 1);
        data.extend_from_slice(utt.frames.row(src));
    }
    Utterance {
        frames: Tensor::new(vec![new_n, d], data).expect("shape"),
        ..utt.clone()
    }
}
