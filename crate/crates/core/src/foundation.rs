//! Small speech encoder and translation model used as the frozen
//! foundation, their pretraining objectives, and checkpointing.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{decoder_io, sorted_chunks, Corpus, SeqBatch, TokenBatch, ToyTask, PAD};
use crate::decode::{decode, DecodeConfig, Hypothesis};
use crate::error::{config, contract, Error, Result};
use crate::metrics::{bleu, chrf2, BleuConfig};
use crate::nn::{
    self, decoder_block, encoder_stack, init, init_decoder_block, init_encoder_stack,
    init_layer_norm, init_linear, init_subsampler, layer_norm, linear, subsample, AttentionMask,
    BlockConfig, Dropout, ParameterSet,
};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::trainer::{fit, Evaluation, Objective, RunLog, TrainConfig};

const EMBED_STD: f64 = 1.0;
/// Readout weights start at std `1/d` so initial logits are near-uniform.
fn readout_std(d: usize) -> f64 {
    1.0 / d as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrConfig {
    /// Output width `d_s`.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig {
            d_model: 48,
            layers: 2,
            heads: 4,
            d_ff: 96,
            dropout: 0.1,
        }
    }
}

impl AsrConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtConfig {
    /// Model width `d_t`.
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for MtConfig {
    fn default() -> Self {
        MtConfig {
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
        }
    }
}

impl MtConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
        }
    }
}

fn to_elems<T: Element>(xs: &[f32]) -> Vec<T> {
    xs.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()
}

// --- checkpoint plumbing ---------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Meta<C> {
    kind: String,
    config: C,
    dims: Vec<usize>,
    frozen: Vec<String>,
}

pub(crate) fn params_to_checkpoint<T: Element, C: Serialize>(
    kind: &str,
    cfg: &C,
    dims: Vec<usize>,
    ps: &ParameterSet<T>,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.push_json(
        "meta",
        &Meta {
            kind: kind.to_string(),
            config: cfg,
            dims,
            frozen: ps.frozen().iter().cloned().collect(),
        },
    )?;
    for (name, t) in ps.iter() {
        ck.push_tensor(&format!("param/{name}"), t);
    }
    Ok(ck)
}

pub(crate) fn params_from_checkpoint<T: Element, C: DeserializeOwned>(
    ck: &Checkpoint,
    kind: &str,
) -> Result<(C, Vec<usize>, ParameterSet<T>)> {
    let meta: Meta<C> = ck.json("meta")?;
    if meta.kind != kind {
        return Err(Error::Format(format!("checkpoint holds a {}, expected a {kind}", meta.kind)));
    }
    let mut ps = ParameterSet::new();
    for e in ck.entries() {
        if let Some(name) = e.name.strip_prefix("param/") {
            ps.insert(name, ck.tensor::<T>(&e.name)?);
        }
    }
    for name in &meta.frozen {
        ps.freeze(name)?;
    }
    Ok((meta.config, meta.dims, ps))
}

// --- speech encoder --------------------------------------------------------

const ASR: &str = "asr";
const ASR_CLS: &str = "cls";

/// Conv subsampler (×4) followed by transformer encoder blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAsrEncoder<T: Element = f32> {
    pub cfg: AsrConfig,
    pub frame_dim: usize,
    pub params: ParameterSet<T>,
}

impl<T: Element> ToyAsrEncoder<T> {
    pub fn new(cfg: AsrConfig, frame_dim: usize, seed: u64) -> Result<Self> {
        cfg.block().validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let d = cfg.d_model;
        init_subsampler(&mut ps, &mut rng, &format!("{ASR}.sub"), frame_dim, d, d);
        init_encoder_stack(&mut ps, &mut rng, &format!("{ASR}.enc"), &cfg.block(), cfg.layers);
        Ok(ToyAsrEncoder {
            cfg,
            frame_dim,
            params: ps,
        })
    }

    pub fn d_out(&self) -> usize {
        self.cfg.d_model
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn cast<U: Element>(&self) -> ToyAsrEncoder<U> {
        ToyAsrEncoder {
            cfg: self.cfg,
            frame_dim: self.frame_dim,
            params: self.params.cast(),
        }
    }

    /// `[batch, n, frame_dim]` frames to `[batch, ceil(n/4), d_s]`.
    pub fn encode(&self, g: &mut Graph<T>, frames: Var, lens: &[usize], drop: &mut Dropout) -> Result<(Var, Vec<usize>)> {
        let (h, lens) = subsample(g, &self.params, &format!("{ASR}.sub"), frames, lens)?;
        let h = nn::add_positions(g, h)?;
        let h = drop.apply(g, h)?;
        let h = encoder_stack(g, &self.params, &format!("{ASR}.enc"), h, &lens, &self.cfg.block(), self.cfg.layers, drop)?;
        Ok((h, lens))
    }

    pub fn encode_batch(&self, g: &mut Graph<T>, batch: &SeqBatch, drop: &mut Dropout) -> Result<(Var, Vec<usize>)> {
        if batch.dim != self.frame_dim {
            return Err(contract(format!("frames have width {}, encoder expects {}", batch.dim, self.frame_dim)));
        }
        let x = g.input(&[batch.batch, batch.max_len, batch.dim], to_elems(&batch.data), false)?;
        self.encode(g, x, &batch.lens, drop)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        params_to_checkpoint("asr_encoder", &self.cfg, vec![self.frame_dim], &self.params)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, dims, params) = params_from_checkpoint(&Checkpoint::load(path)?, "asr_encoder")?;
        Ok(ToyAsrEncoder {
            cfg,
            frame_dim: dims.first().copied().ok_or_else(|| Error::Format("missing frame dim".into()))?,
            params,
        })
    }
}

impl ToyAsrEncoder<f32> {
    /// Encoder outputs `[ceil(n_i/4), d_s]` for every utterance, without dropout.
    pub fn encode_corpus(&self, corpus: &Corpus, batch_size: usize) -> Result<Vec<Tensor<f32>>> {
        let mut out: Vec<Option<Tensor<f32>>> = vec![None; corpus.len()];
        for chunk in sorted_chunks(corpus, batch_size, |u| u.n_frames()) {
            let frames: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &corpus.items[i].frames).collect();
            let batch = SeqBatch::pad(&frames);
            let mut g = Graph::inference();
            let (h, lens) = self.encode_batch(&mut g, &batch, &mut Dropout::off())?;
            let (n, d) = (g.shape(h)[1], g.shape(h)[2]);
            let v = g.value(h);
            for (b, &i) in chunk.iter().enumerate() {
                let rows = v[b * n * d..(b * n + lens[b]) * d].to_vec();
                out[i] = Some(Tensor::new(vec![lens[b], d], rows)?);
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every item encoded")).collect())
    }
}

/// Subsampled frame labels: the label of every 4th frame, one per encoder
/// output position.
pub fn subsampled_labels(frame_labels: &[usize]) -> Vec<usize> {
    frame_labels.iter().step_by(4).copied().collect()
}

struct AsrBatch {
    frames: SeqBatch,
    labels: Vec<usize>,
}

fn asr_batches(corpus: &Corpus, size: usize) -> Vec<AsrBatch> {
    sorted_chunks(corpus, size, |u| u.n_frames())
        .into_iter()
        .map(|chunk| {
            let frames: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &corpus.items[i].frames).collect();
            let frames = SeqBatch::pad(&frames);
            let out_len = nn::subsampled_len(frames.max_len);
            let mut labels = vec![PAD; chunk.len() * out_len];
            for (b, &i) in chunk.iter().enumerate() {
                let l = subsampled_labels(&corpus.items[i].frame_labels());
                labels[b * out_len..b * out_len + l.len()].copy_from_slice(&l);
            }
            AsrBatch { frames, labels }
        })
        .collect()
}

/// Encoder plus a linear frame classifier trained with framewise
/// cross-entropy; the classifier lives under `cls.*` and is dropped after.
struct AsrObjective {
    model: ToyAsrEncoder<f32>,
    val: Vec<AsrBatch>,
}

impl AsrObjective {
    fn logits(&self, g: &mut Graph<f32>, b: &AsrBatch, drop: &mut Dropout) -> Result<Var> {
        let (h, _) = self.model.encode_batch(g, &b.frames, drop)?;
        let d = g.shape(h)[2];
        let rows = g.shape(h)[0] * g.shape(h)[1];
        let h = g.reshape(h, &[rows, d])?;
        linear(g, &self.model.params, ASR_CLS, h)
    }

    fn accuracy(&self) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for b in &self.val {
            let mut g = Graph::inference();
            let logits = self.logits(&mut g, b, &mut Dropout::off())?;
            let v = g.shape(logits)[1];
            for (row, &label) in g.value(logits).chunks(v).zip(&b.labels) {
                if label == PAD {
                    continue;
                }
                total += 1;
                let arg = (0..v).fold(0, |a, t| if row[t] > row[a] { t } else { a });
                hit += usize::from(arg == label);
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }
}

impl Objective for AsrObjective {
    type Batch = AsrBatch;

    fn trainable(&self) -> &ParameterSet<f32> {
        &self.model.params
    }
    fn trainable_mut(&mut self) -> &mut ParameterSet<f32> {
        &mut self.model.params
    }
    fn dropout(&self) -> f64 {
        self.model.cfg.dropout
    }
    fn batch_loss(&self, g: &mut Graph<f32>, b: &AsrBatch, drop: &mut Dropout) -> Result<Var> {
        let logits = self.logits(g, b, drop)?;
        g.cross_entropy(logits, &b.labels, PAD)
    }
    fn evaluate(&self, _: bool) -> Result<Evaluation> {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in &self.val {
            let mut g = Graph::inference();
            let loss = self.batch_loss(&mut g, b, &mut Dropout::off())?;
            let count = b.labels.iter().filter(|&&l| l != PAD).count();
            sum += g.value(loss)[0] as f64 * count as f64;
            n += count;
        }
        Ok(Evaluation {
            val_loss: sum / n.max(1) as f64,
            bleu: None,
            chrf2: None,
        })
    }
}

/// Pretrained speech encoder with its run log and validation frame accuracy.
pub struct AsrPretrained {
    pub encoder: ToyAsrEncoder<f32>,
    pub log: RunLog,
    pub frame_accuracy: f64,
}

/// Trains a fresh encoder on framewise source-token classification.
/// Fails with a divergence error if validation frame accuracy stays below
/// `min_accuracy`.
pub fn pretrain_asr_encoder(
    train: &Corpus,
    val: &Corpus,
    task: &ToyTask,
    cfg: AsrConfig,
    train_cfg: &TrainConfig,
    min_accuracy: f64,
) -> Result<AsrPretrained> {
    if train.is_empty() || val.is_empty() {
        return Err(config("speech pretraining needs non-empty train and validation corpora"));
    }
    let mut model = ToyAsrEncoder::new(cfg, task.config().frame_dim, train_cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0xA5);
    init_linear(&mut model.params, &mut rng, ASR_CLS, cfg.d_model, task.vocab_size());
    let batches = asr_batches(train, train_cfg.batch_size);
    let mut obj = AsrObjective {
        model,
        val: asr_batches(val, train_cfg.batch_size),
    };
    let log = fit(&mut obj, &batches, train_cfg)?;
    let frame_accuracy = obj.accuracy()?;
    log::info!("speech encoder: val frame accuracy {frame_accuracy:.4}");
    if frame_accuracy < min_accuracy {
        return Err(Error::Divergence {
            reason: format!("frame accuracy {frame_accuracy:.4} below {min_accuracy}"),
            curve: log.loss_curve(),
        });
    }
    let mut encoder = obj.model;
    encoder.params.remove_prefix(&format!("{ASR_CLS}."));
    Ok(AsrPretrained {
        encoder,
        log,
        frame_accuracy,
    })
}

// --- translation model -----------------------------------------------------

const MT: &str = "mt";

/// Encoder-decoder translation model with untied source and target embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMtModel<T: Element = f32> {
    pub cfg: MtConfig,
    pub vocab: usize,
    pub params: ParameterSet<T>,
}

pub const MT_ENCODER_PREFIX: &str = "mt.enc";

impl<T: Element> ToyMtModel<T> {
    pub fn new(cfg: MtConfig, vocab: usize, seed: u64) -> Result<Self> {
        cfg.block().validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let d = cfg.d_model;
        ps.insert(format!("{MT}.src_emb"), init::normal(&mut rng, &[vocab, d], EMBED_STD));
        ps.insert(format!("{MT}.tgt_emb"), init::normal(&mut rng, &[vocab, d], EMBED_STD));
        init_encoder_stack(&mut ps, &mut rng, MT_ENCODER_PREFIX, &cfg.block(), cfg.enc_layers);
        for i in 0..cfg.dec_layers {
            init_decoder_block(&mut ps, &mut rng, &format!("{MT}.dec.{i}"), &cfg.block(), d);
        }
        init_layer_norm(&mut ps, &format!("{MT}.dec.ln"), d);
        ps.insert(format!("{MT}.out.w"), init::normal(&mut rng, &[d, vocab], readout_std(d)));
        ps.insert(format!("{MT}.out.b"), init::zeros(&[vocab]));
        Ok(ToyMtModel { cfg, vocab, params: ps })
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    pub fn cast<U: Element>(&self) -> ToyMtModel<U> {
        ToyMtModel {
            cfg: self.cfg,
            vocab: self.vocab,
            params: self.params.cast(),
        }
    }

    /// Source-token embeddings `[batch, n, d_t]`, positions not yet added.
    pub fn embed_source(&self, g: &mut Graph<T>, ids: &[usize], batch: usize) -> Result<Var> {
        let table = self.params.var(g, &format!("{MT}.src_emb"))?;
        nn::embed(g, table, ids, batch)
    }

    /// Adds positions to `[batch, n, d_t]` input embeddings and runs the encoder.
    pub fn encode_embedded(&self, g: &mut Graph<T>, x: Var, lens: &[usize], drop: &mut Dropout) -> Result<Var> {
        let h = nn::add_positions(g, x)?;
        let h = drop.apply(g, h)?;
        encoder_stack(g, &self.params, MT_ENCODER_PREFIX, h, lens, &self.cfg.block(), self.cfg.enc_layers, drop)
    }

    pub fn encode_tokens(&self, g: &mut Graph<T>, src: &TokenBatch, drop: &mut Dropout) -> Result<Var> {
        let x = self.embed_source(g, &src.ids, src.batch)?;
        self.encode_embedded(g, x, &src.lens, drop)
    }

    /// Teacher-forced decoder logits `[batch · T, V]` for decoder inputs
    /// `tgt_in` (row-major `batch × T`) over `memory` `[batch, n, d_t]`.
    pub fn decode_logits(
        &self,
        g: &mut Graph<T>,
        memory: Var,
        mem_lens: &[usize],
        tgt_in: &[usize],
        batch: usize,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let s = g.shape(memory).to_vec();
        if s.len() != 3 || s[0] != batch || s[2] != self.cfg.d_model || mem_lens.len() != batch {
            return Err(contract(format!(
                "decoder memory {s:?} does not match batch {batch} and width {}",
                self.cfg.d_model
            )));
        }
        let t = tgt_in.len().checked_div(batch).unwrap_or(0);
        if t == 0 {
            let w = g.input(&[0, self.vocab], Vec::new(), false)?;
            return Ok(w);
        }
        let table = self.params.var(g, &format!("{MT}.tgt_emb"))?;
        let y = nn::embed(g, table, tgt_in, batch)?;
        let y = nn::add_positions(g, y)?;
        let mut y = drop.apply(g, y)?;
        let self_mask = AttentionMask::causal(batch, t);
        let cross_mask = AttentionMask::key_padding(mem_lens, t, s[1]);
        let block = self.cfg.block();
        for i in 0..self.cfg.dec_layers {
            y = decoder_block(g, &self.params, &format!("{MT}.dec.{i}"), y, memory, &self_mask, &cross_mask, &block, drop)?;
        }
        let y = layer_norm(g, &self.params, &format!("{MT}.dec.ln"), y)?;
        let y = g.reshape(y, &[batch * t, self.cfg.d_model])?;
        linear(g, &self.params, &format!("{MT}.out"), y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        params_to_checkpoint("mt_model", &self.cfg, vec![self.vocab], &self.params)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, dims, params) = params_from_checkpoint(&Checkpoint::load(path)?, "mt_model")?;
        Ok(ToyMtModel {
            cfg,
            vocab: dims.first().copied().ok_or_else(|| Error::Format("missing vocab size".into()))?,
            params,
        })
    }
}

/// Decodes from precomputed per-item memories `[n_i, d_t]`.
pub fn decode_from_memory(
    mt: &ToyMtModel<f32>,
    memories: &[Tensor<f32>],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    let d = mt.d_model();
    let scorer = |rows: &[usize], prefixes: &[Vec<usize>]| -> Result<Vec<Vec<f32>>> {
        let n = rows.iter().map(|&i| memories[i].shape()[0]).max().unwrap_or(0);
        let mut mem = vec![0.0f32; rows.len() * n * d];
        let mut lens = Vec::with_capacity(rows.len());
        for (b, &i) in rows.iter().enumerate() {
            let m = &memories[i];
            mem[b * n * d..b * n * d + m.numel()].copy_from_slice(m.data());
            lens.push(m.shape()[0]);
        }
        let t = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != t) {
            return Err(contract("decoder prefixes must share a length"));
        }
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut g = Graph::inference();
        let memory = g.input(&[rows.len(), n, d], mem, false)?;
        let logits = mt.decode_logits(&mut g, memory, &lens, &ids, rows.len(), &mut Dropout::off())?;
        let v = mt.vocab;
        let data = g.value(logits);
        Ok((0..rows.len())
            .map(|b| data[(b * t + t - 1) * v..(b * t + t) * v].to_vec())
            .collect())
    };
    let mut out = Vec::with_capacity(memories.len());
    // Decode in slices to bound graph size.
    const SLICE: usize = 64;
    for start in (0..memories.len()).step_by(SLICE) {
        let end = (start + SLICE).min(memories.len());
        let mut sliced = |rows: &[usize], p: &[Vec<usize>]| {
            let rows: Vec<usize> = rows.iter().map(|r| r + start).collect();
            scorer(&rows, p)
        };
        out.extend(decode(end - start, cfg, &mut sliced)?);
    }
    Ok(out)
}

impl ToyMtModel<f32> {
    /// Encoder memories `[len_i, d_t]` for each source sequence.
    pub fn memories(&self, sources: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
        let d = self.d_model();
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(64) {
            let src = TokenBatch::pad(chunk, PAD);
            let mut g = Graph::inference();
            let h = self.encode_tokens(&mut g, &src, &mut Dropout::off())?;
            let n = src.max_len;
            let v = g.value(h);
            for (b, &l) in src.lens.iter().enumerate() {
                out.push(Tensor::new(vec![l, d], v[b * n * d..(b * n + l) * d].to_vec())?);
            }
        }
        Ok(out)
    }

    pub fn translate(&self, sources: &[Vec<usize>], cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        decode_from_memory(self, &self.memories(sources)?, cfg)
    }
}

/// Corpus BLEU and chrF2 of decoded hypotheses against target tokens.
pub fn score_tokens(hyps: &[Hypothesis], targets: &[&[usize]]) -> Result<(f64, f64)> {
    let h: Vec<String> = hyps.iter().map(|h| ToyTask::detokenize(&h.tokens)).collect();
    let r: Vec<String> = targets.iter().map(|t| ToyTask::detokenize(t)).collect();
    Ok((bleu(&h, &r, &BleuConfig::default())?, chrf2(&h, &r)?))
}

pub struct MtBatch {
    src: TokenBatch,
    tgt_in: TokenBatch,
    tgt_out: TokenBatch,
}

fn mt_batches(corpus: &Corpus, size: usize) -> Vec<MtBatch> {
    sorted_chunks(corpus, size, |u| u.source.len())
        .into_iter()
        .map(|chunk| {
            let src: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus.items[i].source.clone()).collect();
            let tgt: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus.items[i].target.clone()).collect();
            let (tgt_in, tgt_out) = decoder_io(&tgt, PAD);
            MtBatch {
                src: TokenBatch::pad(&src, PAD),
                tgt_in,
                tgt_out,
            }
        })
        .collect()
}

struct MtObjective<'a> {
    model: ToyMtModel<f32>,
    val: &'a Corpus,
    val_batches: Vec<MtBatch>,
}

impl MtObjective<'_> {
    fn bleu(&self) -> Result<(f64, f64)> {
        let sources: Vec<Vec<usize>> = self.val.items.iter().map(|u| u.source.clone()).collect();
        let max_len = sources.iter().map(Vec::len).max().unwrap_or(0) + 8;
        let hyps = self.model.translate(
            &sources,
            &DecodeConfig {
                max_len,
                ..DecodeConfig::default()
            },
        )?;
        let refs: Vec<&[usize]> = self.val.items.iter().map(|u| u.target.as_slice()).collect();
        score_tokens(&hyps, &refs)
    }
}

impl Objective for MtObjective<'_> {
    type Batch = MtBatch;

    fn trainable(&self) -> &ParameterSet<f32> {
        &self.model.params
    }
    fn trainable_mut(&mut self) -> &mut ParameterSet<f32> {
        &mut self.model.params
    }
    fn dropout(&self) -> f64 {
        self.model.cfg.dropout
    }
    fn batch_loss(&self, g: &mut Graph<f32>, b: &MtBatch, drop: &mut Dropout) -> Result<Var> {
        let memory = self.model.encode_tokens(g, &b.src, drop)?;
        let logits = self.model.decode_logits(g, memory, &b.src.lens, &b.tgt_in.ids, b.src.batch, drop)?;
        g.cross_entropy(logits, &b.tgt_out.ids, PAD)
    }
    fn evaluate(&self, with_bleu: bool) -> Result<Evaluation> {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in &self.val_batches {
            let mut g = Graph::inference();
            let loss = self.batch_loss(&mut g, b, &mut Dropout::off())?;
            let count = b.tgt_out.lens.iter().sum::<usize>();
            sum += g.value(loss)[0] as f64 * count as f64;
            n += count;
        }
        let (bleu, chrf2) = if with_bleu {
            let (b, c) = self.bleu()?;
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
}

pub struct MtPretrained {
    pub model: ToyMtModel<f32>,
    pub log: RunLog,
    pub val_bleu: f64,
}

/// Trains a fresh translation model on the text side of `train`. Fails with
/// a divergence error if validation BLEU stays below `min_bleu`.
pub fn pretrain_mt(
    train: &Corpus,
    val: &Corpus,
    vocab: usize,
    cfg: MtConfig,
    train_cfg: &TrainConfig,
    min_bleu: f64,
) -> Result<MtPretrained> {
    if train.is_empty() || val.is_empty() {
        return Err(config("translation pretraining needs non-empty train and validation corpora"));
    }
    let model = ToyMtModel::new(cfg, vocab, train_cfg.seed)?;
    let batches = mt_batches(train, train_cfg.batch_size);
    let mut obj = MtObjective {
        model,
        val,
        val_batches: mt_batches(val, train_cfg.batch_size),
    };
    let log = fit(&mut obj, &batches, train_cfg)?;
    let (val_bleu, _) = obj.bleu()?;
    log::info!("translation model: val BLEU {val_bleu:.2}");
    if val_bleu < min_bleu {
        return Err(Error::Divergence {
            reason: format!("validation BLEU {val_bleu:.2} below {min_bleu}"),
            curve: log.loss_curve(),
        });
    }
    Ok(MtPretrained {
        model: obj.model,
        log,
        val_bleu,
    })
}
