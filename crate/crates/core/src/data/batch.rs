use super::{Corpus, BOS, EOS};
use crate::tensor::Tensor;

/// Right-padded float sequences `[batch, max_len, dim]` with valid lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub data: Vec<f32>,
    pub batch: usize,
    pub max_len: usize,
    pub dim: usize,
    pub lens: Vec<usize>,
}

impl SeqBatch {
    /// Pads `[len_i, dim]` tensors with zero rows up to the longest.
    pub fn pad(seqs: &[&Tensor<f32>]) -> Self {
        let dim = seqs.first().map_or(0, |t| t.shape()[1]);
        let lens: Vec<usize> = seqs.iter().map(|t| t.shape()[0]).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let mut data = vec![0.0; seqs.len() * max_len * dim];
        for (b, t) in seqs.iter().enumerate() {
            data[b * max_len * dim..b * max_len * dim + t.numel()].copy_from_slice(t.data());
        }
        SeqBatch {
            data,
            batch: seqs.len(),
            max_len,
            dim,
            lens,
        }
    }

    /// `true` where a position holds real data.
    pub fn mask(&self) -> Vec<bool> {
        self.lens
            .iter()
            .flat_map(|&l| (0..self.max_len).map(move |t| t < l))
            .collect()
    }
}

/// Right-padded token sequences `[batch, max_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub max_len: usize,
    pub lens: Vec<usize>,
}

impl TokenBatch {
    pub fn pad(seqs: &[Vec<usize>], pad_id: usize) -> Self {
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let mut ids = vec![pad_id; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * max_len..b * max_len + s.len()].copy_from_slice(s);
        }
        TokenBatch {
            ids,
            batch: seqs.len(),
            max_len,
            lens,
        }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.max_len..b * self.max_len + self.lens[b]]
    }
}

/// Teacher-forcing pair: decoder inputs `BOS t…` and outputs `t… EOS`.
pub fn decoder_io(targets: &[Vec<usize>], pad_id: usize) -> (TokenBatch, TokenBatch) {
    let inputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
        .collect();
    let outputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| t.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect();
    (TokenBatch::pad(&inputs, pad_id), TokenBatch::pad(&outputs, pad_id))
}

/// One padded minibatch drawn from a corpus.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Positions of the items in the source corpus.
    pub indices: Vec<usize>,
    pub frames: SeqBatch,
    pub source: TokenBatch,
    pub target_in: TokenBatch,
    pub target_out: TokenBatch,
}

impl Batch {
    pub fn from_indices(corpus: &Corpus, indices: &[usize], pad_id: usize) -> Self {
        let items: Vec<_> = indices.iter().map(|&i| &corpus.items[i]).collect();
        let frames: Vec<&Tensor<f32>> = items.iter().map(|u| &u.frames).collect();
        let sources: Vec<Vec<usize>> = items.iter().map(|u| u.source.clone()).collect();
        let targets: Vec<Vec<usize>> = items.iter().map(|u| u.target.clone()).collect();
        let (target_in, target_out) = decoder_io(&targets, pad_id);
        Batch {
            indices: indices.to_vec(),
            frames: SeqBatch::pad(&frames),
            source: TokenBatch::pad(&sources, pad_id),
            target_in,
            target_out,
        }
    }
}

/// Consecutive batches of `size` items in the order given by `order`.
pub fn batches<'a>(corpus: &'a Corpus, order: &'a [usize], size: usize, pad_id: usize) -> impl Iterator<Item = Batch> + 'a {
    order
        .chunks(size.max(1))
        .map(move |chunk| Batch::from_indices(corpus, chunk, pad_id))
}

/// Index groups of at most `size` items after a stable sort by `key`, so
/// batches hold items of similar length.
pub fn sorted_chunks(corpus: &Corpus, size: usize, key: impl Fn(&super::Utterance) -> usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| key(&corpus.items[i]));
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Batches in corpus order.
pub fn batch(corpus: &Corpus, size: usize, pad_id: usize) -> Vec<Batch> {
    let order: Vec<usize> = (0..corpus.len()).collect();
    batches(corpus, &order, size, pad_id).collect()
}
