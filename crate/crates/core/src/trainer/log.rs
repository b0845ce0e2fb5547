use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chrf2: Option<f64>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
    Summary {
        best_eval: Option<usize>,
        stopped_early: bool,
        wall_time_s: f64,
    },
}

/// Training history. Everything except `wall_time_s` is a deterministic
/// function of the inputs and seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` of the restored checkpoint.
    pub best_eval: Option<usize>,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

impl RunLog {
    pub fn best(&self) -> Option<&EvalRecord> {
        self.best_eval.map(|i| &self.evals[i])
    }

    pub fn loss_curve(&self) -> Vec<f32> {
        self.steps.iter().map(|s| s.loss as f32).collect()
    }

    /// Same records, ignoring wall time, with float fields within `tol`.
    pub fn matches(&self, other: &RunLog, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol || (a.is_nan() && b.is_nan());
        let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        self.steps.len() == other.steps.len()
            && self.evals.len() == other.evals.len()
            && self.best_eval == other.best_eval
            && self.stopped_early == other.stopped_early
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step && a.epoch == b.epoch && close(a.loss, b.loss) && close(a.lr, b.lr)
            })
            && self.evals.iter().zip(&other.evals).all(|(a, b)| {
                a.step == b.step
                    && close(a.val_loss, b.val_loss)
                    && close_opt(a.bleu, b.bleu)
                    && close_opt(a.chrf2, b.chrf2)
            })
    }

    /// One JSON object per line: steps, evals, then a summary.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut out, &Line::Step(s))?;
            out.push(b'\n');
        }
        for e in &self.evals {
            serde_json::to_writer(&mut out, &Line::Eval(e))?;
            out.push(b'\n');
        }
        serde_json::to_writer(
            &mut out,
            &Line::Summary {
                best_eval: self.best_eval,
                stopped_early: self.stopped_early,
                wall_time_s: self.wall_time_s,
            },
        )?;
        out.push(b'\n');
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }
}
