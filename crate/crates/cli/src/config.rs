//! Run configuration file (TOML). Every table is optional; missing keys take
//! the values printed by `stalign defaults`, unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stalign::alignment::Topology;
use stalign::connectors::{ConnectorConfig, QFormerConfig, SteConfig};
use stalign::data::{LengthDist, TaskConfig};
use stalign::foundation::{AsrConfig, MtConfig};
use stalign::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorKind {
    Qformer,
    Ste,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_items: usize,
    pub val_items: usize,
    /// Source-token length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub length_dist: LengthDist,
    /// Train and validation corpora are drawn with `seed` and `seed + 1`.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_items: 5000,
            val_items: 500,
            min_len: 2,
            max_len: 24,
            length_dist: LengthDist::Uniform,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub asr: TrainConfig,
    pub mt: TrainConfig,
    /// Pretraining fails (exit 4) below these validation scores.
    pub asr_min_accuracy: f64,
    pub mt_min_bleu: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            asr: TrainConfig {
                max_epochs: 4,
                warmup_steps: 300,
                peak_lr: 5e-3,
                ..TrainConfig::default()
            },
            mt: TrainConfig {
                max_epochs: 15,
                warmup_steps: 300,
                peak_lr: 5e-3,
                ..TrainConfig::default()
            },
            asr_min_accuracy: 0.9,
            mt_min_bleu: 90.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub n_q: Vec<usize>,
    pub fractions: Vec<f64>,
    pub split_seed: u64,
    pub n_buckets: usize,
    /// Q-Former query counts compared against STE by `bucket-eval`.
    pub bucket_n_q: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            layers: vec![2, 4, 6],
            n_q: vec![4, 8, 16, 32, 64],
            fractions: vec![1.0 / 16.0, 0.25, 0.5, 1.0],
            split_seed: 0,
            n_buckets: 4,
            bucket_n_q: vec![4, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Artifacts go to `<runs_dir>/<name>/`.
    pub name: String,
    pub runs_dir: PathBuf,
    pub topology: Topology,
    pub connector: ConnectorKind,
    /// Source-vocabulary ids prepended to the connector output (ECED only).
    pub prompt: Vec<usize>,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub asr: AsrConfig,
    pub mt: MtConfig,
    pub qformer: QFormerConfig,
    pub ste: SteConfig,
    pub pretrain: PretrainConfig,
    pub align: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            runs_dir: "runs".into(),
            topology: Topology::Ecd,
            connector: ConnectorKind::Ste,
            prompt: Vec::new(),
            task: TaskConfig::default(),
            data: DataConfig::default(),
            asr: AsrConfig {
                dropout: 0.0,
                ..AsrConfig::default()
            },
            mt: MtConfig {
                dropout: 0.0,
                ..MtConfig::default()
            },
            qformer: QFormerConfig::default(),
            ste: SteConfig::default(),
            pretrain: PretrainConfig::default(),
            align: TrainConfig {
                max_epochs: 30,
                warmup_steps: 300,
                peak_lr: 3e-3,
                ..TrainConfig::default()
            },
            sweep: SweepConfig::default(),
        }
    }
}

fn key(k: &'static str) -> impl Fn(stalign::Error) -> String {
    move |e| format!("{k}: {e}")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(format!("name: `{}` must be a non-empty single path component", self.name));
        }
        if self.data.train_items == 0 || self.data.val_items == 0 {
            return Err("data: train_items and val_items must be >= 1".into());
        }
        if self.data.min_len == 0 || self.data.min_len > self.data.max_len || self.data.max_len > 64 {
            return Err("data: need 1 <= min_len <= max_len <= 64".into());
        }
        self.asr.block().validate().map_err(key("asr"))?;
        self.mt.block().validate().map_err(key("mt"))?;
        ConnectorConfig::Qformer(self.qformer).validate().map_err(key("qformer"))?;
        ConnectorConfig::Ste(self.ste).validate().map_err(key("ste"))?;
        self.pretrain.asr.validate().map_err(key("pretrain.asr"))?;
        self.pretrain.mt.validate().map_err(key("pretrain.mt"))?;
        self.align.validate().map_err(key("align"))?;
        if self.topology == Topology::Ecd && !self.prompt.is_empty() {
            return Err("prompt: prompt tokens need topology = \"eced\"".into());
        }
        if self.sweep.n_buckets == 0 {
            return Err("sweep.n_buckets must be >= 1".into());
        }
        Ok(())
    }

    pub fn connector_config(&self, kind: ConnectorKind) -> ConnectorConfig {
        match kind {
            ConnectorKind::Qformer => ConnectorConfig::Qformer(self.qformer),
            ConnectorKind::Ste => ConnectorConfig::Ste(self.ste),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    pub fn defaults_toml() -> String {
        toml::to_string_pretty(&RunConfig::default()).expect("defaults serialise")
    }
}
