//! Grids of alignment runs producing metric tables.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{score_features, train_alignment_cached, AlignedModel, Topology};
use crate::connectors::{count_params, ConnectorConfig, QFormerConfig};
use crate::data::{bucket_by_length, low_resource_splits, Corpus};
use crate::error::{config, Result};
use crate::foundation::{ToyAsrEncoder, ToyMtModel};
use crate::tensor::Tensor;

use super::TrainConfig;

/// A corpus with its cached speech-encoder features.
#[derive(Debug, Clone)]
pub struct Featured {
    pub name: String,
    pub corpus: Corpus,
    pub feats: Vec<Tensor<f32>>,
}

impl Featured {
    pub fn encode(name: impl Into<String>, corpus: Corpus, asr: &ToyAsrEncoder<f32>) -> Result<Self> {
        let feats = asr.encode_corpus(&corpus, 64)?;
        Ok(Featured {
            name: name.into(),
            corpus,
            feats,
        })
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Re-attaches features to `parts`, each a sub-corpus of this one.
    fn attach(&self, parts: Vec<Corpus>, name: impl Fn(usize) -> String) -> Vec<Featured> {
        let by_id: HashMap<usize, usize> = self.corpus.items.iter().enumerate().map(|(i, u)| (u.id, i)).collect();
        parts
            .into_iter()
            .enumerate()
            .map(|(k, corpus)| Featured {
                name: name(k),
                feats: corpus.items.iter().map(|u| self.feats[by_id[&u.id]].clone()).collect(),
                corpus,
            })
            .collect()
    }

    /// Equal-width source-length buckets named `bucket0`, `bucket1`, ...
    pub fn buckets(&self, n: usize) -> Vec<Featured> {
        self.attach(bucket_by_length(&self.corpus, n), |k| format!("bucket{k}"))
    }

    /// Nested low-resource subsets named `frac<f>`.
    pub fn low_resource(&self, fractions: &[f64], seed: u64) -> Result<Vec<Featured>> {
        let parts = low_resource_splits(&self.corpus, fractions, seed)?;
        Ok(self.attach(parts, |k| format!("frac{}", fractions[k])))
    }
}

/// One line of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arch: String,
    pub connector: String,
    pub layers: usize,
    pub n_q: Option<usize>,
    pub params: usize,
    pub split: String,
    pub bleu: f64,
    pub chrf2: f64,
}

pub const CSV_HEADER: &str = "arch,connector,layers,n_q,params,split,bleu,chrf2";

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let n_q = r.n_q.map(|n| n.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{:.4},{:.4}",
            r.arch, r.connector, r.layers, n_q, r.params, r.split, r.bleu, r.chrf2
        )
        .expect("write to string");
    }
    out
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

/// Everything a grid shares: frozen foundation models, data and training
/// settings. Each cell trains a fresh connector seeded from `train_cfg.seed`.
pub struct Sweep<'a> {
    pub topology: Topology,
    pub asr: &'a ToyAsrEncoder<f32>,
    pub mt: &'a ToyMtModel<f32>,
    pub prompt: Vec<usize>,
    pub train: &'a Featured,
    pub val: &'a Featured,
    /// Splits scored after training; one row each.
    pub evals: &'a [Featured],
    pub train_cfg: &'a TrainConfig,
}

impl Sweep<'_> {
    /// Trains one connector on `train` and scores it on every eval split.
    pub fn cell(&self, cfg: ConnectorConfig, train: &Featured, tag: Option<&str>) -> Result<(AlignedModel<f32>, Vec<ResultRow>)> {
        let mut model = AlignedModel::new(
            self.topology,
            self.asr.clone(),
            self.mt.clone(),
            cfg,
            self.prompt.clone(),
            self.train_cfg.seed,
        )?;
        train_alignment_cached(
            &mut model,
            &train.corpus,
            &train.feats,
            &self.val.corpus,
            &self.val.feats,
            self.train_cfg,
        )?;
        let rows = self
            .evals
            .iter()
            .map(|split| {
                let (bleu, chrf2) = score_features(&model, &split.feats, &split.corpus)?;
                Ok(ResultRow {
                    arch: self.topology.name().to_uppercase(),
                    connector: cfg.name().to_string(),
                    layers: cfg.layers(),
                    n_q: cfg.n_q(),
                    params: count_params(&cfg, model.connector.d_in, model.connector.d_out),
                    split: match tag {
                        Some(t) => format!("{t}/{}", split.name),
                        None => split.name.clone(),
                    },
                    bleu,
                    chrf2,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((model, rows))
    }

    /// One run per connector depth.
    pub fn layers(&self, base: ConnectorConfig, layers: &[usize]) -> Result<Vec<ResultRow>> {
        nonempty(layers.len(), "layer grid")?;
        let mut rows = Vec::new();
        for &l in layers {
            rows.extend(self.cell(base.with_layers(l), self.train, None)?.1);
        }
        Ok(rows)
    }

    /// One Q-Former run per query count.
    pub fn queries(&self, base: QFormerConfig, n_qs: &[usize]) -> Result<Vec<ResultRow>> {
        nonempty(n_qs.len(), "query grid")?;
        let mut rows = Vec::new();
        for &n_q in n_qs {
            let cfg = ConnectorConfig::Qformer(QFormerConfig { n_q, ..base });
            rows.extend(self.cell(cfg, self.train, None)?.1);
        }
        Ok(rows)
    }

    /// One run per nested training fraction; split labels carry the fraction.
    pub fn low_resource(&self, cfg: ConnectorConfig, fractions: &[f64], split_seed: u64) -> Result<Vec<ResultRow>> {
        nonempty(fractions.len(), "fraction grid")?;
        let mut rows = Vec::new();
        for part in self.train.low_resource(fractions, split_seed)? {
            if part.is_empty() {
                return Err(config(format!("{} of the training set is empty", part.name)));
            }
            rows.extend(self.cell(cfg, &part, Some(&part.name))?.1);
        }
        Ok(rows)
    }
}

fn nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(config(format!("{what} is empty")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_fixed_columns() {
        let row = ResultRow {
            arch: "ECD".into(),
            connector: "ste".into(),
            layers: 2,
            n_q: None,
            params: 10,
            split: "val".into(),
            bleu: 1.0,
            chrf2: 2.5,
        };
        let csv = to_csv(&[row.clone(), ResultRow { n_q: Some(4), ..row }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "ECD,ste,2,,10,val,1.0000,2.5000");
        assert_eq!(lines[2], "ECD,ste,2,4,10,val,1.0000,2.5000");
    }
}
