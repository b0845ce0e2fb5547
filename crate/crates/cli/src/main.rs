//! `stalign` command-line entry point.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use stalign::alignment::{score_features, train_alignment_cached, AlignedModel, Topology};
use stalign::connectors::{ConnectorConfig, QFormerConfig};
use stalign::data::io::{load_corpus, save_corpus};
use stalign::data::{Corpus, ToyTask};
use stalign::foundation::{pretrain_asr_encoder, pretrain_mt, ToyAsrEncoder, ToyMtModel};
use stalign::trainer::sweep::{to_csv, write_csv, Featured, ResultRow, Sweep};

use config::{ConnectorKind, RunConfig};

#[derive(Parser)]
#[command(name = "stalign", version, about = "Align a frozen speech encoder with a frozen translation model through a trainable connector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (TOML); see `stalign defaults`.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Overrides `topology` from the config.
    #[arg(long, value_parser = parse_topology)]
    topology: Option<Topology>,
    /// Overrides `connector` from the config.
    #[arg(long, value_enum)]
    connector: Option<ConnectorKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and validation corpora into `<run>/data/`.
    GenData(ConfigArg),
    /// Pretrain the speech encoder and write `<run>/asr.ckpt`.
    PretrainAsr(ConfigArg),
    /// Pretrain the translation model and write `<run>/mt.ckpt`.
    PretrainMt(ConfigArg),
    /// Train a connector between the frozen models and write `<run>/aligned.ckpt`.
    Align {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        model: ModelArgs,
        /// Connector checkpoint path (default `<run>/aligned.ckpt`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a trained connector; prints `bleu=<x> chrf2=<y>`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Connector checkpoint written by `align`.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// One alignment per connector depth in `sweep.layers`; writes `<run>/layers.csv`.
    SweepLayers {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// One Q-Former alignment per query count in `sweep.n_q`; writes `<run>/queries.csv`.
    SweepQueries {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_topology)]
        topology: Option<Topology>,
    },
    /// One alignment per training fraction in `sweep.fractions`; writes `<run>/lowres.csv`.
    SweepLowres {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// STE and Q-Former (`sweep.bucket_n_q`) scored per length bucket; writes
    /// `<run>/buckets.csv` and `<run>/buckets_wide.csv`.
    BucketEval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_parser = parse_topology)]
        topology: Option<Topology>,
    },
    /// Print the full default configuration.
    Defaults,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Val,
}

fn parse_topology(s: &str) -> Result<Topology, String> {
    match s {
        "ecd" => Ok(Topology::Ecd),
        "eced" => Ok(Topology::Eced),
        _ => Err(format!("unknown topology `{s}` (expected ecd or eced)")),
    }
}

enum Failure {
    Missing(PathBuf),
    Config(String),
    Abort(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Missing(_) => 2,
            Failure::Config(_) => 3,
            Failure::Abort(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Missing(p) => write!(f, "missing checkpoint: {}", p.display()),
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Abort(m) => write!(f, "training aborted: {m}"),
            Failure::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<stalign::Error> for Failure {
    fn from(e: stalign::Error) -> Self {
        match e {
            stalign::Error::Config(m) => Failure::Config(m),
            e @ stalign::Error::Divergence { .. } => Failure::Abort(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    RunConfig::load(&arg.config).map_err(Failure::Config)
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Defaults => {
            print!("{}", RunConfig::defaults_toml());
            Ok(())
        }
        Command::GenData(c) => gen_data(&load_config(&c)?),
        Command::PretrainAsr(c) => pretrain_asr(&load_config(&c)?),
        Command::PretrainMt(c) => pretrain_translation(&load_config(&c)?),
        Command::Align { cfg, model, out } => align(&load_config(&cfg)?, &model, out),
        Command::Eval { cfg, ckpt, split } => eval(&load_config(&cfg)?, &ckpt, split),
        Command::SweepLayers { cfg, model } => {
            let cfg = load_config(&cfg)?;
            let conn = cfg.connector_config(model.connector.unwrap_or(cfg.connector));
            sweep(&cfg, model.topology, "layers.csv", |s| s.layers(conn, &cfg.sweep.layers))
        }
        Command::SweepQueries { cfg, topology } => {
            let cfg = load_config(&cfg)?;
            sweep(&cfg, topology, "queries.csv", |s| s.queries(cfg.qformer, &cfg.sweep.n_q))
        }
        Command::SweepLowres { cfg, model } => {
            let cfg = load_config(&cfg)?;
            let conn = cfg.connector_config(model.connector.unwrap_or(cfg.connector));
            sweep(&cfg, model.topology, "lowres.csv", |s| {
                s.low_resource(conn, &cfg.sweep.fractions, cfg.sweep.split_seed)
            })
        }
        Command::BucketEval { cfg, topology } => bucket_eval(&load_config(&cfg)?, topology),
    }
}

fn task(cfg: &RunConfig) -> Result<ToyTask, Failure> {
    Ok(ToyTask::new(cfg.task.clone())?)
}

fn generate(cfg: &RunConfig) -> Result<(Corpus, Corpus), Failure> {
    let t = task(cfg)?;
    let d = &cfg.data;
    let range = (d.min_len, d.max_len);
    let train = t.generate(d.train_items, d.seed, range, d.length_dist)?;
    let val = t.generate(d.val_items, d.seed + 1, range, d.length_dist)?;
    Ok((train, val))
}

/// Corpora from `<run>/data/` when present, otherwise regenerated from the
/// config (generation is a pure function of it).
fn corpora(cfg: &RunConfig) -> Result<(Corpus, Corpus), Failure> {
    let dir = cfg.run_dir().join("data");
    if dir.join("train/corpus.jsonl").exists() && dir.join("val/corpus.jsonl").exists() {
        return Ok((load_corpus(&dir.join("train"))?, load_corpus(&dir.join("val"))?));
    }
    generate(cfg)
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Missing(path.to_path_buf()))
    }
}

fn foundations(cfg: &RunConfig) -> Result<(ToyAsrEncoder<f32>, ToyMtModel<f32>), Failure> {
    let (asr, mt) = (cfg.run_dir().join("asr.ckpt"), cfg.run_dir().join("mt.ckpt"));
    require(&asr)?;
    require(&mt)?;
    Ok((ToyAsrEncoder::load(&asr)?, ToyMtModel::load(&mt)?))
}

fn gen_data(cfg: &RunConfig) -> Outcome {
    let (train, val) = generate(cfg)?;
    let dir = cfg.run_dir().join("data");
    save_corpus(&dir.join("train"), &train)?;
    save_corpus(&dir.join("val"), &val)?;
    info!("wrote {}", dir.display());
    println!("train={} val={}", train.len(), val.len());
    Ok(())
}

fn pretrain_asr(cfg: &RunConfig) -> Outcome {
    let (train, val) = corpora(cfg)?;
    let t = task(cfg)?;
    let out = pretrain_asr_encoder(&train, &val, &t, cfg.asr, &cfg.pretrain.asr, cfg.pretrain.asr_min_accuracy)?;
    let dir = cfg.run_dir();
    out.encoder.save(&dir.join("asr.ckpt"))?;
    out.log.write_jsonl(&dir.join("asr.runlog.jsonl"))?;
    println!("frame_accuracy={:.6}", out.frame_accuracy);
    Ok(())
}

fn pretrain_translation(cfg: &RunConfig) -> Outcome {
    let (train, val) = corpora(cfg)?;
    let vocab = task(cfg)?.vocab_size();
    let out = pretrain_mt(&train, &val, vocab, cfg.mt, &cfg.pretrain.mt, cfg.pretrain.mt_min_bleu)?;
    let dir = cfg.run_dir();
    out.model.save(&dir.join("mt.ckpt"))?;
    out.log.write_jsonl(&dir.join("mt.runlog.jsonl"))?;
    println!("bleu={:.4}", out.val_bleu);
    Ok(())
}

fn align(cfg: &RunConfig, args: &ModelArgs, out: Option<PathBuf>) -> Outcome {
    let (asr, mt) = foundations(cfg)?;
    let (train, val) = corpora(cfg)?;
    let topology = args.topology.unwrap_or(cfg.topology);
    let conn = cfg.connector_config(args.connector.unwrap_or(cfg.connector));
    let mut model = AlignedModel::new(topology, asr, mt, conn, cfg.prompt.clone(), cfg.align.seed)?;
    let train = Featured::encode("train", train, &model.asr)?;
    let val = Featured::encode("val", val, &model.asr)?;
    let run = train_alignment_cached(&mut model, &train.corpus, &train.feats, &val.corpus, &val.feats, &cfg.align)?;
    let dir = cfg.run_dir();
    let path = out.unwrap_or_else(|| dir.join("aligned.ckpt"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    model.save_connector(&path)?;
    run.log.write_jsonl(&path.with_extension("runlog.jsonl"))?;
    let metrics = serde_json::json!({
        "topology": topology.name(),
        "connector": conn.name(),
        "params": model.connector.count_params(),
        "split": "val",
        "bleu": run.val_bleu,
        "chrf2": run.val_chrf2,
    });
    std::fs::write(path.with_extension("metrics.json"), format!("{metrics:#}\n"))?;
    println!("bleu={:.4} chrf2={:.4}", run.val_bleu, run.val_chrf2);
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt: &Path, split: Split) -> Outcome {
    require(ckpt)?;
    let (asr, mt) = foundations(cfg)?;
    let model = AlignedModel::load_connector(ckpt, asr, mt)?;
    let (train, val) = corpora(cfg)?;
    let corpus = match split {
        Split::Train => train,
        Split::Val => val,
    };
    let feats = model.asr.encode_corpus(&corpus, 64)?;
    let (bleu, chrf2) = score_features(&model, &feats, &corpus)?;
    println!("bleu={bleu:.4} chrf2={chrf2:.4}");
    Ok(())
}

struct SweepData {
    asr: ToyAsrEncoder<f32>,
    mt: ToyMtModel<f32>,
    train: Featured,
    val: Featured,
}

fn sweep_data(cfg: &RunConfig) -> Result<SweepData, Failure> {
    let (asr, mt) = foundations(cfg)?;
    let (train, val) = corpora(cfg)?;
    let train = Featured::encode("train", train, &asr)?;
    let val = Featured::encode("val", val, &asr)?;
    Ok(SweepData { asr, mt, train, val })
}

fn sweep(
    cfg: &RunConfig,
    topology: Option<Topology>,
    file: &str,
    grid: impl FnOnce(&Sweep) -> stalign::Result<Vec<ResultRow>>,
) -> Outcome {
    let d = sweep_data(cfg)?;
    let evals = [d.val.clone()];
    let s = Sweep {
        topology: topology.unwrap_or(cfg.topology),
        asr: &d.asr,
        mt: &d.mt,
        prompt: cfg.prompt.clone(),
        train: &d.train,
        val: &d.val,
        evals: &evals,
        train_cfg: &cfg.align,
    };
    let rows = grid(&s)?;
    let path = cfg.run_dir().join(file);
    write_csv(&rows, &path)?;
    info!("wrote {}", path.display());
    print!("{}", to_csv(&rows));
    Ok(())
}

fn bucket_eval(cfg: &RunConfig, topology: Option<Topology>) -> Outcome {
    let d = sweep_data(cfg)?;
    let buckets = d.val.buckets(cfg.sweep.n_buckets);
    let s = Sweep {
        topology: topology.unwrap_or(cfg.topology),
        asr: &d.asr,
        mt: &d.mt,
        prompt: cfg.prompt.clone(),
        train: &d.train,
        val: &d.val,
        evals: &buckets,
        train_cfg: &cfg.align,
    };
    let mut systems: Vec<ConnectorConfig> = cfg
        .sweep
        .bucket_n_q
        .iter()
        .map(|&n_q| ConnectorConfig::Qformer(QFormerConfig { n_q, ..cfg.qformer }))
        .collect();
    systems.push(ConnectorConfig::Ste(cfg.ste));
    let mut rows = Vec::new();
    let mut wide = format!(
        "system,{}\n",
        buckets.iter().map(|b| b.name.as_str()).collect::<Vec<_>>().join(",")
    );
    for sys in systems {
        let (_, r) = s.cell(sys, &d.train, None)?;
        let label = match sys.n_q() {
            Some(n) => format!("{}_nq{n}", sys.name()),
            None => sys.name().to_string(),
        };
        let cells: Vec<String> = r.iter().map(|row| format!("{:.4}", row.bleu)).collect();
        wide.push_str(&format!("{label},{}\n", cells.join(",")));
        rows.extend(r);
    }
    let dir = cfg.run_dir();
    write_csv(&rows, &dir.join("buckets.csv"))?;
    std::fs::write(dir.join("buckets_wide.csv"), &wide)?;
    info!("wrote {}", dir.join("buckets.csv").display());
    print!("{wide}");
    Ok(())
}
