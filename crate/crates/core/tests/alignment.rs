//! Composition, freezing and loss plumbing of the aligned model.

use stalign::alignment::{AlignedModel, Topology};
use stalign::connectors::{count_params, ConnectorConfig, QFormerConfig, SteConfig};
use stalign::data::{decoder_io, LengthDist, SeqBatch, TaskConfig, ToyTask, PAD};
use stalign::foundation::{AsrConfig, MtConfig, ToyAsrEncoder, ToyMtModel};
use stalign::nn::Dropout;
use stalign::{Error, Graph, Tensor};

fn tiny_asr() -> ToyAsrEncoder<f64> {
    let cfg = AsrConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        dropout: 0.0,
    };
    ToyAsrEncoder::new(cfg, 16, 1).unwrap()
}

fn tiny_mt(vocab: usize) -> ToyMtModel<f64> {
    let cfg = MtConfig {
        d_model: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_ff: 16,
        dropout: 0.0,
    };
    ToyMtModel::new(cfg, vocab, 2).unwrap()
}

fn small_ste() -> ConnectorConfig {
    ConnectorConfig::Ste(SteConfig {
        d_c: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        conv_channels: 8,
        ..SteConfig::default()
    })
}

fn small_qformer(n_q: usize) -> ConnectorConfig {
    ConnectorConfig::Qformer(QFormerConfig {
        n_q,
        d_c: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        ..QFormerConfig::default()
    })
}

fn model(topology: Topology, cfg: ConnectorConfig, prompt: Vec<usize>) -> AlignedModel<f64> {
    AlignedModel::new(topology, tiny_asr(), tiny_mt(35), cfg, prompt, 3).unwrap()
}

fn frames(lens: &[usize]) -> SeqBatch {
    let ts: Vec<Tensor<f32>> = lens
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let data = (0..n * 16).map(|k| ((k * 7 + i * 13) % 11) as f32 / 5.0 - 1.0).collect();
            Tensor::new(vec![n, 16], data).unwrap()
        })
        .collect();
    SeqBatch::pad(&ts.iter().collect::<Vec<_>>())
}

fn memory_lens(m: &AlignedModel<f64>, batch: &SeqBatch) -> (Vec<usize>, usize) {
    let mut g = Graph::inference();
    let (feats, lens) = m.asr.encode_batch(&mut g, batch, &mut Dropout::off()).unwrap();
    let mem = m.memory_from_features(&mut g, feats, &lens, &mut Dropout::off()).unwrap();
    (mem.lens, g.shape(mem.var)[1])
}

#[test]
fn composed_memory_length() {
    let b = frames(&[40, 17, 1, 64]);
    let ste = model(Topology::Ecd, small_ste(), vec![]);
    let (lens, _) = memory_lens(&ste, &b);
    let want: Vec<usize> = [40usize, 17, 1, 64].iter().map(|n| n.div_ceil(4).div_ceil(4)).collect();
    assert_eq!(lens, want);
    assert_eq!(lens, vec![3, 2, 1, 4]);

    let qf = model(Topology::Ecd, small_qformer(6), vec![]);
    assert_eq!(memory_lens(&qf, &b).0, vec![6; 4]);
}

#[test]
fn prompt_extends_encoder_input() {
    let b = frames(&[40, 9]);
    let plain = model(Topology::Eced, small_ste(), vec![]);
    let prompted = model(Topology::Eced, small_ste(), vec![5, 9, 11]);
    let (l0, n0) = memory_lens(&plain, &b);
    let (l1, n1) = memory_lens(&prompted, &b);
    assert_eq!(l1, l0.iter().map(|l| l + 3).collect::<Vec<_>>());
    assert_eq!(n1, n0 + 3);
}

#[test]
fn empty_prompt_feeds_connector_output_to_encoder() {
    let b = frames(&[24, 12]);
    let m = model(Topology::Eced, small_qformer(4), vec![]);
    let mut g = Graph::inference();
    let (feats, lens) = m.asr.encode_batch(&mut g, &b, &mut Dropout::off()).unwrap();
    let mem = m.memory_from_features(&mut g, feats, &lens, &mut Dropout::off()).unwrap();
    let out = m.connector.forward(&mut g, feats, &lens, &mut Dropout::off()).unwrap();
    let direct = m.mt.encode_embedded(&mut g, out.embeddings, &out.lengths, &mut Dropout::off()).unwrap();
    assert_eq!(g.value(mem.var), g.value(direct));
}

#[test]
fn topology_and_prompt_contracts() {
    let b = frames(&[8]);
    let (tin, _) = decoder_io(&[vec![3, 4]], PAD);
    let ecd = model(Topology::Ecd, small_ste(), vec![]);
    let eced = model(Topology::Eced, small_ste(), vec![]);
    let mut g = Graph::inference();
    assert!(matches!(ecd.forward_eced(&mut g, &b, &tin, &mut Dropout::off()), Err(Error::Contract(_))));
    assert!(matches!(eced.forward_ecd(&mut g, &b, &tin, &mut Dropout::off()), Err(Error::Contract(_))));
    assert!(ecd.forward_ecd(&mut g, &b, &tin, &mut Dropout::off()).is_ok());

    let r = AlignedModel::new(Topology::Ecd, tiny_asr(), tiny_mt(35), small_ste(), vec![4], 0);
    assert!(matches!(r, Err(Error::Contract(_))));
    let r = AlignedModel::new(Topology::Eced, tiny_asr(), tiny_mt(35), small_ste(), vec![35], 0);
    assert!(matches!(r, Err(Error::Index { .. })));
}

#[test]
fn zero_length_target_gives_empty_logits_and_zero_loss() {
    let m = model(Topology::Ecd, small_ste(), vec![]);
    let b = frames(&[12]);
    let (tin, _) = decoder_io(&[vec![]], PAD);
    let mut g = Graph::new();
    // Teacher forcing always feeds BOS, so a zero-length target still has one
    // decoder step; an empty decoder input yields no rows.
    let empty = stalign::data::TokenBatch {
        ids: vec![],
        batch: 1,
        max_len: 0,
        lens: vec![0],
    };
    let logits = m.forward(&mut g, &b, &empty, &mut Dropout::off()).unwrap();
    assert_eq!(g.shape(logits), &[0, 35]);
    let loss = g.cross_entropy(logits, &[], PAD).unwrap();
    assert_eq!(g.value(loss)[0], 0.0);
    assert_eq!(tin.max_len, 1);
}

#[test]
fn only_the_connector_learns() {
    for (topology, prompt) in [(Topology::Ecd, vec![]), (Topology::Eced, vec![7, 8])] {
        for cfg in [small_ste(), small_qformer(3)] {
            let mut m = model(topology, cfg, prompt.clone());
            let b = frames(&[20, 13]);
            let (tin, tout) = decoder_io(&[vec![3, 4, 5], vec![6]], PAD);
            let mut g = Graph::new();
            let logits = m.forward(&mut g, &b, &tin, &mut Dropout::off()).unwrap();
            let loss = g.cross_entropy(logits, &tout.ids, PAD).unwrap();
            g.backward(loss).unwrap();
            m.asr.params.absorb_grads(&g);
            m.mt.params.absorb_grads(&g);
            m.connector.params.absorb_grads(&g);
            assert!(m.asr.params.iter().all(|(_, t)| t.grad.is_none()));
            assert!(m.mt.params.iter().all(|(_, t)| t.grad.is_none()));
            let reached = m
                .connector
                .params
                .iter()
                .filter(|(_, t)| t.grad.as_ref().is_some_and(|g| g.iter().any(|&v| v != 0.0)))
                .count();
            assert_eq!(reached, m.connector.params.len(), "{} {}", topology.name(), cfg.name());
            assert!(m.mt.params.is_frozen("mt.src_emb"));
        }
    }
}

#[test]
fn census_is_connector_closed_form() {
    let task = ToyTask::new(TaskConfig::default()).unwrap();
    let v = task.vocab_size();
    for cfg in [
        ConnectorConfig::Qformer(QFormerConfig::default()),
        ConnectorConfig::Ste(SteConfig::default()),
        ConnectorConfig::Ste(SteConfig::default()).with_layers(6),
    ] {
        let asr = ToyAsrEncoder::<f32>::new(AsrConfig::default(), 16, 0).unwrap();
        let mt = ToyMtModel::<f32>::new(MtConfig::default(), v, 0).unwrap();
        let ecd = AlignedModel::new(Topology::Ecd, asr.clone(), mt.clone(), cfg, vec![], 0).unwrap();
        let eced = AlignedModel::new(Topology::Eced, asr, mt, cfg, vec![3, 4], 0).unwrap();
        assert_eq!(ecd.trainable_census(), count_params(&cfg, 48, 64));
        assert_eq!(ecd.trainable_census(), eced.trainable_census());
    }
}

#[test]
fn untrained_connector_loss_is_near_chance() {
    let task = ToyTask::new(TaskConfig::default()).unwrap();
    let v = task.vocab_size();
    let corpus = task.generate(32, 5, (2, 24), LengthDist::Uniform).unwrap();
    let asr = ToyAsrEncoder::<f32>::new(AsrConfig::default(), 16, 6).unwrap();
    let mt = ToyMtModel::<f32>::new(MtConfig::default(), v, 7).unwrap();
    for topology in [Topology::Ecd, Topology::Eced] {
        for cfg in [ConnectorConfig::Qformer(QFormerConfig::default()), ConnectorConfig::Ste(SteConfig::default())] {
            let m = AlignedModel::new(topology, asr.clone(), mt.clone(), cfg, vec![], 8).unwrap();
            let frames: Vec<&Tensor<f32>> = corpus.items.iter().map(|u| &u.frames).collect();
            let targets: Vec<Vec<usize>> = corpus.items.iter().map(|u| u.target.clone()).collect();
            let (tin, tout) = decoder_io(&targets, PAD);
            let mut g = Graph::inference();
            let logits = m.forward(&mut g, &SeqBatch::pad(&frames), &tin, &mut Dropout::off()).unwrap();
            let loss = g.cross_entropy(logits, &tout.ids, PAD).unwrap();
            let loss = g.value(loss)[0] as f64;
            let chance = (v as f64).ln();
            assert!((loss - chance).abs() <= 0.1 * chance, "{} {}: loss {loss}, ln V {chance}", topology.name(), cfg.name());
        }
    }
}

#[test]
fn padded_batch_loss_is_token_weighted_item_loss() {
    let lens = [40usize, 9, 23];
    let targets = vec![vec![3, 4, 5, 6, 7], vec![8], vec![9, 10, 11]];
    for topology in [Topology::Ecd, Topology::Eced] {
        for cfg in [small_ste(), small_qformer(3)] {
            let m = model(topology, cfg, if topology == Topology::Eced { vec![12] } else { vec![] });
            let loss_of = |fl: &[usize], ts: &[Vec<usize>]| {
                let (tin, tout) = decoder_io(ts, PAD);
                let mut g = Graph::inference();
                let logits = m.forward(&mut g, &frames(fl), &tin, &mut Dropout::off()).unwrap();
                let l = g.cross_entropy(logits, &tout.ids, PAD).unwrap();
                g.value(l)[0]
            };
            let batched = loss_of(&lens, &targets);
            // Item i of `frames(&lens)` is regenerated alone with the same
            // content, so build singleton batches from the same helper.
            let mut sum = 0.0;
            let mut count = 0;
            for (i, t) in targets.iter().enumerate() {
                let b = frames(&lens);
                let n = lens[i];
                let item = Tensor::new(vec![n, 16], b.data[i * b.max_len * 16..(i * b.max_len + n) * 16].to_vec()).unwrap();
                let single = SeqBatch::pad(&[&item]);
                let (tin, tout) = decoder_io(std::slice::from_ref(t), PAD);
                let mut g = Graph::inference();
                let logits = m.forward(&mut g, &single, &tin, &mut Dropout::off()).unwrap();
                let l = g.cross_entropy(logits, &tout.ids, PAD).unwrap();
                let tokens = t.len() + 1;
                sum += g.value(l)[0] * tokens as f64;
                count += tokens;
            }
            let item_wise = sum / count as f64;
            assert!((batched - item_wise).abs() < 1e-5, "{} {}: {batched} vs {item_wise}", topology.name(), cfg.name());
        }
    }
}

#[test]
fn connector_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let asr = ToyAsrEncoder::<f32>::new(AsrConfig::default(), 16, 0).unwrap();
    let mt = ToyMtModel::<f32>::new(MtConfig::default(), 35, 0).unwrap();
    let m = AlignedModel::new(Topology::Eced, asr.clone(), mt.clone(), ConnectorConfig::Ste(SteConfig::default()), vec![3], 9).unwrap();
    let path = dir.path().join("aligned.ckpt");
    m.save_connector(&path).unwrap();
    let back = AlignedModel::load_connector(&path, asr, mt).unwrap();
    assert_eq!(back.topology, Topology::Eced);
    assert_eq!(back.prompt, vec![3]);
    assert!(back.connector.params.bitwise_eq(&m.connector.params));

    let other_mt = ToyMtModel::<f32>::new(MtConfig { d_model: 32, ..MtConfig::default() }, 35, 0).unwrap();
    let asr = ToyAsrEncoder::<f32>::new(AsrConfig::default(), 16, 0).unwrap();
    assert!(AlignedModel::load_connector(&path, asr, other_mt).is_err());
}
