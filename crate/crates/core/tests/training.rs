//! Alignment training loop and sweep harnesses on miniature models.

use stalign::alignment::{feature_batches, train_alignment_cached, AlignedModel, Topology};
use stalign::connectors::{count_params, ConnectorConfig, QFormerConfig, SteConfig};
use stalign::data::{LengthDist, TaskConfig, ToyTask};
use stalign::foundation::{pretrain_mt, AsrConfig, MtConfig, ToyAsrEncoder, ToyMtModel};
use stalign::nn::Dropout;
use stalign::trainer::sweep::{Featured, Sweep};
use stalign::trainer::TrainConfig;
use stalign::Graph;

fn foundations(task: &ToyTask) -> (ToyAsrEncoder<f32>, ToyMtModel<f32>) {
    let asr = ToyAsrEncoder::new(
        AsrConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            d_ff: 32,
            dropout: 0.0,
        },
        task.config().frame_dim,
        1,
    )
    .unwrap();
    let mt = ToyMtModel::new(
        MtConfig {
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ff: 32,
            dropout: 0.0,
        },
        task.vocab_size(),
        2,
    )
    .unwrap();
    (asr, mt)
}

fn small_ste(layers: usize) -> ConnectorConfig {
    ConnectorConfig::Ste(SteConfig {
        d_c: 16,
        layers,
        heads: 2,
        d_ff: 32,
        conv_channels: 32,
        dropout: 0.0,
        ..SteConfig::default()
    })
}

fn small_qformer() -> QFormerConfig {
    QFormerConfig {
        n_q: 4,
        d_c: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        dropout: 0.0,
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        max_epochs: 1,
        warmup_steps: 10,
        peak_lr: 1e-3,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn memorises_a_small_corpus() {
    let task = ToyTask::new(TaskConfig::default()).unwrap();
    let corpus = task.generate(32, 3, (2, 8), LengthDist::Uniform).unwrap();
    let (asr, mt) = foundations(&task);
    // A random frozen readout cannot express confident predictions, so the
    // translation model is pretrained briefly first.
    let text = task.generate(2000, 10, (2, 8), LengthDist::Uniform).unwrap();
    let mt_cfg = TrainConfig {
        max_epochs: 30,
        warmup_steps: 100,
        peak_lr: 5e-3,
        ..TrainConfig::default()
    };
    let mt_model = MtConfig {
        d_model: 32,
        enc_layers: 1,
        dec_layers: 1,
        heads: 4,
        d_ff: 64,
        dropout: 0.0,
    };
    let mt = pretrain_mt(&text, &corpus, mt.vocab, mt_model, &mt_cfg, 0.0).unwrap();
    let mut model = AlignedModel::new(Topology::Ecd, asr, mt.model, small_ste(2), vec![], 4).unwrap();
    let feats = model.asr.encode_corpus(&corpus, 32).unwrap();
    let cfg = TrainConfig {
        max_epochs: 600,
        warmup_steps: 50,
        peak_lr: 5e-3,
        batch_size: 32,
        patience: 600,
        ..TrainConfig::default()
    };
    train_alignment_cached(&mut model, &corpus, &feats, &corpus, &feats, &cfg).unwrap();
    let b = &feature_batches(&feats, &corpus, 32)[0];
    let mut g = Graph::inference();
    let loss = model.feature_loss(&mut g, b, &mut Dropout::off()).unwrap();
    let loss = g.value(loss)[0];
    assert!(loss < 0.05, "train loss {loss}");
}

#[test]
fn identical_seeds_give_identical_logs() {
    let task = ToyTask::new(TaskConfig::default()).unwrap();
    let train = task.generate(48, 5, (2, 8), LengthDist::Uniform).unwrap();
    let val = task.generate(16, 6, (2, 8), LengthDist::Uniform).unwrap();
    let (asr, mt) = foundations(&task);
    let run = || {
        let mut model = AlignedModel::new(Topology::Eced, asr.clone(), mt.clone(), small_ste(1), vec![5], 7).unwrap();
        let cfg = TrainConfig { max_epochs: 2, ..quick_cfg() };
        let tf = model.asr.encode_corpus(&train, 16).unwrap();
        let vf = model.asr.encode_corpus(&val, 16).unwrap();
        let r = train_alignment_cached(&mut model, &train, &tf, &val, &vf, &cfg).unwrap();
        (r.log, model.connector.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert!(a.matches(&b, 1e-6));
    assert!(pa.bitwise_eq(&pb));
}

#[test]
fn sweeps_emit_one_row_per_cell_and_split() {
    let task = ToyTask::new(TaskConfig::default()).unwrap();
    let (asr, mt) = foundations(&task);
    let train = Featured::encode("train", task.generate(64, 8, (2, 12), LengthDist::Uniform).unwrap(), &asr).unwrap();
    let val = Featured::encode("val", task.generate(16, 9, (2, 12), LengthDist::Uniform).unwrap(), &asr).unwrap();
    let evals = vec![val.clone()];
    let cfg = quick_cfg();
    let sweep = Sweep {
        topology: Topology::Ecd,
        asr: &asr,
        mt: &mt,
        prompt: vec![],
        train: &train,
        val: &val,
        evals: &evals,
        train_cfg: &cfg,
    };

    let rows = sweep.layers(small_ste(1), &[1, 2, 3]).unwrap();
    assert_eq!(rows.len(), 3);
    for (r, l) in rows.iter().zip([1, 2, 3]) {
        assert_eq!(r.layers, l);
        assert_eq!(r.params, count_params(&small_ste(l), 16, 16));
        assert_eq!(r.split, "val");
    }

    let rows = sweep.queries(small_qformer(), &[2, 4, 6, 8]).unwrap();
    assert_eq!(rows.len(), 4);
    for (r, n_q) in rows.iter().zip([2, 4, 6, 8]) {
        let cfg = ConnectorConfig::Qformer(QFormerConfig { n_q, ..small_qformer() });
        assert_eq!(r.n_q, Some(n_q));
        assert_eq!(r.params, count_params(&cfg, 16, 16));
    }

    let rows = sweep.low_resource(small_ste(1), &[0.25, 1.0], 0).unwrap();
    assert_eq!(rows.iter().map(|r| r.split.as_str()).collect::<Vec<_>>(), ["frac0.25/val", "frac1/val"]);

    let buckets = val.buckets(4);
    assert_eq!(buckets.iter().map(Featured::len).sum::<usize>(), val.len());
    let by_bucket = Sweep { evals: &buckets, ..sweep };
    let rows = by_bucket.layers(small_ste(1), &[1]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(by_bucket.layers(small_ste(1), &[]).is_err());
}
