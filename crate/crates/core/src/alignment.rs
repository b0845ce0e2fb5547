//! Frozen speech encoder + trainable connector + frozen translation model.
//!
//! ECD feeds connector outputs to the translation decoder's cross-attention.
//! ECED feeds them (after optional prompt embeddings) into the translation
//! encoder in place of source word embeddings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::connectors::{Connector, ConnectorConfig, ConnectorOutput};
use crate::data::{decoder_io, sorted_chunks, Corpus, SeqBatch, TokenBatch, PAD};
use crate::decode::{DecodeConfig, Hypothesis};
use crate::error::{contract, Error, Result};
use crate::foundation::{
    decode_from_memory, params_from_checkpoint, params_to_checkpoint, score_tokens, ToyAsrEncoder,
    ToyMtModel,
};
use crate::nn::{Dropout, ParameterSet};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::trainer::{fit, Evaluation, Objective, RunLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Ecd,
    Eced,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Ecd => "ecd",
            Topology::Eced => "eced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedModel<T: Element = f32> {
    pub topology: Topology,
    pub asr: ToyAsrEncoder<T>,
    pub connector: Connector<T>,
    pub mt: ToyMtModel<T>,
    /// Source-vocabulary ids prepended to the connector output (ECED only).
    pub prompt: Vec<usize>,
}

/// Decoder memory `[batch, n, d_t]` with per-item lengths.
pub struct Memory {
    pub var: Var,
    pub lens: Vec<usize>,
}

impl<T: Element> AlignedModel<T> {
    /// Freezes both foundation models and attaches a fresh connector.
    pub fn new(
        topology: Topology,
        mut asr: ToyAsrEncoder<T>,
        mut mt: ToyMtModel<T>,
        connector: ConnectorConfig,
        prompt: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if topology == Topology::Ecd && !prompt.is_empty() {
            return Err(contract("prompt tokens need the ECED topology"));
        }
        if let Some(&bad) = prompt.iter().find(|&&p| p >= mt.vocab) {
            return Err(Error::Index {
                what: "prompt token",
                index: bad,
                bound: mt.vocab,
            });
        }
        asr.freeze();
        mt.freeze();
        let connector = Connector::new(connector, asr.d_out(), mt.d_model(), seed)?;
        Ok(AlignedModel {
            topology,
            asr,
            connector,
            mt,
            prompt,
        })
    }

    pub fn cast<U: Element>(&self) -> AlignedModel<U> {
        AlignedModel {
            topology: self.topology,
            asr: self.asr.cast(),
            connector: Connector {
                cfg: self.connector.cfg,
                d_in: self.connector.d_in,
                d_out: self.connector.d_out,
                params: self.connector.params.cast(),
            },
            mt: self.mt.cast(),
            prompt: self.prompt.clone(),
        }
    }

    /// Number of trainable scalars across all three parts.
    pub fn trainable_census(&self) -> usize {
        self.asr.params.trainable_numel() + self.connector.params.trainable_numel() + self.mt.params.trainable_numel()
    }

    /// Speech-encoder features `[batch, n_s, d_s]` to decoder memory.
    pub fn memory_from_features(
        &self,
        g: &mut Graph<T>,
        feats: Var,
        lens: &[usize],
        drop: &mut Dropout,
    ) -> Result<Memory> {
        let ConnectorOutput { embeddings, lengths } = self.connector.forward(g, feats, lens, drop)?;
        match self.topology {
            Topology::Ecd => Ok(Memory {
                var: embeddings,
                lens: lengths,
            }),
            Topology::Eced => {
                let batch = lens.len();
                let (input, lens) = if self.prompt.is_empty() {
                    (embeddings, lengths)
                } else {
                    let ids: Vec<usize> = (0..batch).flat_map(|_| self.prompt.iter().copied()).collect();
                    let prompt = self.mt.embed_source(g, &ids, batch)?;
                    let joined = g.concat(&[prompt, embeddings], 1)?;
                    (joined, lengths.iter().map(|l| l + self.prompt.len()).collect())
                };
                let memory = self.mt.encode_embedded(g, input, &lens, &mut Dropout::off())?;
                Ok(Memory { var: memory, lens })
            }
        }
    }

    /// Teacher-forced logits `[batch · T, V]` from speech features.
    pub fn logits_from_features(
        &self,
        g: &mut Graph<T>,
        feats: Var,
        lens: &[usize],
        tgt_in: &TokenBatch,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let m = self.memory_from_features(g, feats, lens, drop)?;
        self.mt.decode_logits(g, m.var, &m.lens, &tgt_in.ids, tgt_in.batch, &mut Dropout::off())
    }

    fn forward_checked(
        &self,
        want: Topology,
        g: &mut Graph<T>,
        frames: &SeqBatch,
        tgt_in: &TokenBatch,
        drop: &mut Dropout,
    ) -> Result<Var> {
        if self.topology != want {
            return Err(contract(format!(
                "model topology is {}, called forward for {}",
                self.topology.name(),
                want.name()
            )));
        }
        let (feats, lens) = self.asr.encode_batch(g, frames, &mut Dropout::off())?;
        self.logits_from_features(g, feats, &lens, tgt_in, drop)
    }

    pub fn forward_ecd(&self, g: &mut Graph<T>, frames: &SeqBatch, tgt_in: &TokenBatch, drop: &mut Dropout) -> Result<Var> {
        self.forward_checked(Topology::Ecd, g, frames, tgt_in, drop)
    }

    pub fn forward_eced(&self, g: &mut Graph<T>, frames: &SeqBatch, tgt_in: &TokenBatch, drop: &mut Dropout) -> Result<Var> {
        self.forward_checked(Topology::Eced, g, frames, tgt_in, drop)
    }

    pub fn forward(&self, g: &mut Graph<T>, frames: &SeqBatch, tgt_in: &TokenBatch, drop: &mut Dropout) -> Result<Var> {
        self.forward_checked(self.topology, g, frames, tgt_in, drop)
    }
}

#[derive(Serialize, Deserialize)]
struct AlignedMeta {
    topology: Topology,
    connector: ConnectorConfig,
    prompt: Vec<usize>,
}

impl AlignedModel<f32> {
    /// Per-item decoder memories `[len_i, d_t]` from cached speech features.
    pub fn memories(&self, feats: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
        let d = self.mt.d_model();
        let mut out: Vec<Option<Tensor<f32>>> = vec![None; feats.len()];
        let mut order: Vec<usize> = (0..feats.len()).collect();
        order.sort_by_key(|&i| feats[i].shape()[0]);
        for chunk in order.chunks(64) {
            let refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &feats[i]).collect();
            let batch = SeqBatch::pad(&refs);
            let mut g = Graph::inference();
            let x = g.input(&[batch.batch, batch.max_len, batch.dim], batch.data.clone(), false)?;
            let m = self.memory_from_features(&mut g, x, &batch.lens, &mut Dropout::off())?;
            let n = g.shape(m.var)[1];
            let v = g.value(m.var);
            for (b, &i) in chunk.iter().enumerate() {
                let l = m.lens[b];
                out[i] = Some(Tensor::new(vec![l, d], v[b * n * d..(b * n + l) * d].to_vec())?);
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every item")).collect())
    }

    pub fn decode_features(&self, feats: &[Tensor<f32>], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        decode_from_memory(&self.mt, &self.memories(feats)?, cfg)
    }

    /// Speech frames to target tokens.
    pub fn decode(&self, corpus: &Corpus, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        self.decode_features(&self.asr.encode_corpus(corpus, 64)?, cfg)
    }

    /// Saves the connector together with the topology and prompt. The
    /// foundation models are stored separately.
    pub fn save_connector(&self, path: &Path) -> Result<()> {
        let mut ck = params_to_checkpoint("connector", &self.connector.cfg, vec![self.connector.d_in, self.connector.d_out], &self.connector.params)?;
        ck.push_json(
            "aligned",
            &AlignedMeta {
                topology: self.topology,
                connector: self.connector.cfg,
                prompt: self.prompt.clone(),
            },
        )?;
        ck.save(path)
    }

    /// Rebuilds an aligned model from a saved connector and foundation models.
    pub fn load_connector(path: &Path, asr: ToyAsrEncoder<f32>, mt: ToyMtModel<f32>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let meta: AlignedMeta = ck.json("aligned")?;
        let (cfg, dims, params): (ConnectorConfig, Vec<usize>, ParameterSet<f32>) = params_from_checkpoint(&ck, "connector")?;
        let mut model = AlignedModel::new(meta.topology, asr, mt, cfg, meta.prompt, 0)?;
        if dims != [model.connector.d_in, model.connector.d_out] {
            return Err(Error::Format(format!(
                "connector maps {dims:?}, foundation models need [{}, {}]",
                model.connector.d_in, model.connector.d_out
            )));
        }
        model.connector.params.load_values(&params)?;
        Ok(model)
    }
}

/// Cached speech features with teacher-forcing targets.
pub struct FeatureBatch {
    feats: SeqBatch,
    tgt_in: TokenBatch,
    tgt_out: TokenBatch,
}

impl FeatureBatch {
    pub fn token_count(&self) -> usize {
        self.tgt_out.lens.iter().sum()
    }
}

pub fn feature_batches(feats: &[Tensor<f32>], corpus: &Corpus, size: usize) -> Vec<FeatureBatch> {
    sorted_chunks(corpus, size, |u| u.n_frames())
        .into_iter()
        .map(|chunk| feature_batch(feats, corpus, &chunk))
        .collect()
}

pub fn feature_batch(feats: &[Tensor<f32>], corpus: &Corpus, indices: &[usize]) -> FeatureBatch {
    let f: Vec<&Tensor<f32>> = indices.iter().map(|&i| &feats[i]).collect();
    let tgt: Vec<Vec<usize>> = indices.iter().map(|&i| corpus.items[i].target.clone()).collect();
    let (tgt_in, tgt_out) = decoder_io(&tgt, PAD);
    FeatureBatch {
        feats: SeqBatch::pad(&f),
        tgt_in,
        tgt_out,
    }
}

impl AlignedModel<f32> {
    /// Token-weighted mean cross-entropy of one feature batch.
    pub fn feature_loss(&self, g: &mut Graph<f32>, b: &FeatureBatch, drop: &mut Dropout) -> Result<Var> {
        let x = g.input(&[b.feats.batch, b.feats.max_len, b.feats.dim], b.feats.data.clone(), false)?;
        let logits = self.logits_from_features(g, x, &b.feats.lens, &b.tgt_in, drop)?;
        g.cross_entropy(logits, &b.tgt_out.ids, PAD)
    }
}

struct AlignObjective<'a> {
    model: &'a mut AlignedModel<f32>,
    asr_snapshot: ParameterSet<f32>,
    mt_snapshot: ParameterSet<f32>,
    val_feats: &'a [Tensor<f32>],
    val: &'a Corpus,
    val_batches: Vec<FeatureBatch>,
}

/// Greedy decoding budget: longest reference plus slack.
pub fn eval_decode_config(corpus: &Corpus) -> DecodeConfig {
    DecodeConfig {
        max_len: corpus.items.iter().map(|u| u.target.len()).max().unwrap_or(0) + 8,
        ..DecodeConfig::default()
    }
}

/// Corpus BLEU and chrF2 of an aligned model on cached features.
pub fn score_features(model: &AlignedModel<f32>, feats: &[Tensor<f32>], corpus: &Corpus) -> Result<(f64, f64)> {
    let hyps = model.decode_features(feats, &eval_decode_config(corpus))?;
    let refs: Vec<&[usize]> = corpus.items.iter().map(|u| u.target.as_slice()).collect();
    score_tokens(&hyps, &refs)
}

impl Objective for AlignObjective<'_> {
    type Batch = FeatureBatch;

    fn trainable(&self) -> &ParameterSet<f32> {
        &self.model.connector.params
    }
    fn trainable_mut(&mut self) -> &mut ParameterSet<f32> {
        &mut self.model.connector.params
    }
    fn dropout(&self) -> f64 {
        self.model.connector.cfg.block().dropout
    }
    fn batch_loss(&self, g: &mut Graph<f32>, b: &FeatureBatch, drop: &mut Dropout) -> Result<Var> {
        self.model.feature_loss(g, b, drop)
    }
    fn evaluate(&self, with_bleu: bool) -> Result<Evaluation> {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in &self.val_batches {
            let mut g = Graph::inference();
            let loss = self.batch_loss(&mut g, b, &mut Dropout::off())?;
            sum += g.value(loss)[0] as f64 * b.token_count() as f64;
            n += b.token_count();
        }
        let (bleu, chrf2) = if with_bleu {
            let (b, c) = score_features(self.model, self.val_feats, self.val)?;
            (Some(b), Some(c))
        } else {
            (None, None)
        };
        Ok(Evaluation {
            val_loss: sum / n.max(1) as f64,
            bleu,
            chrf2,
        })
    }
    fn audit(&self) -> Result<()> {
        if !self.model.asr.params.bitwise_eq(&self.asr_snapshot) || !self.model.mt.params.bitwise_eq(&self.mt_snapshot) {
            return Err(contract("a frozen foundation tensor changed during alignment"));
        }
        Ok(())
    }
}

pub struct AlignmentRun {
    pub log: RunLog,
    pub val_bleu: f64,
    pub val_chrf2: f64,
}

/// Trains only the connector of `model` on `train`, early-stopping on `val`
/// loss. Speech features are computed once, since the encoder is frozen.
pub fn train_alignment(model: &mut AlignedModel<f32>, train: &Corpus, val: &Corpus, cfg: &TrainConfig) -> Result<AlignmentRun> {
    let train_feats = model.asr.encode_corpus(train, 64)?;
    let val_feats = model.asr.encode_corpus(val, 64)?;
    train_alignment_cached(model, train, &train_feats, val, &val_feats, cfg)
}

/// [`train_alignment`] over precomputed speech features.
pub fn train_alignment_cached(
    model: &mut AlignedModel<f32>,
    train: &Corpus,
    train_feats: &[Tensor<f32>],
    val: &Corpus,
    val_feats: &[Tensor<f32>],
    cfg: &TrainConfig,
) -> Result<AlignmentRun> {
    if model.asr.params.trainable_numel() + model.mt.params.trainable_numel() != 0 {
        return Err(contract("foundation models must be frozen before alignment"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(crate::error::config("alignment needs non-empty train and validation corpora"));
    }
    let batches = feature_batches(train_feats, train, cfg.batch_size);
    let mut obj = AlignObjective {
        asr_snapshot: model.asr.params.clone(),
        mt_snapshot: model.mt.params.clone(),
        val_batches: feature_batches(val_feats, val, cfg.batch_size),
        model,
        val_feats,
        val,
    };
    let log = fit(&mut obj, &batches, cfg)?;
    obj.audit()?;
    let (val_bleu, val_chrf2) = score_features(obj.model, val_feats, val)?;
    Ok(AlignmentRun {
        log,
        val_bleu,
        val_chrf2,
    })
}
