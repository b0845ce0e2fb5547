//! Optimisation loop shared by pretraining and connector alignment.

mod adam;
mod log;
pub mod sweep;

pub use adam::Adam;
pub use log::{EvalRecord, RunLog, StepRecord};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::nn::{Dropout, ParameterSet};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    /// Evaluations without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
    /// Decode the validation set at every evaluation, not just at the end.
    pub eval_bleu: bool,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            warmup_steps: 500,
            peak_lr: 1e-3,
            batch_size: 32,
            patience: 5,
            seed: 0,
            eval_every: 1,
            eval_bleu: false,
            max_steps: None,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(config("warmup_steps must be >= 1"));
        }
        if self.patience == 0 {
            return Err(config("patience must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.max_epochs == 0 {
            return Err(config("batch_size, eval_every and max_epochs must be >= 1"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `peak_lr` over `warmup_steps`, then
/// `peak_lr · sqrt(warmup / step)`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (s, w) = (step as f64, cfg.warmup_steps as f64);
    if step <= cfg.warmup_steps {
        cfg.peak_lr * s / w
    } else {
        cfg.peak_lr * (w / s).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub val_loss: f64,
    pub bleu: Option<f64>,
    pub chrf2: Option<f64>,
}

/// A model plus data that the loop can optimise.
pub trait Objective {
    type Batch;

    fn trainable(&self) -> &ParameterSet<f32>;
    fn trainable_mut(&mut self) -> &mut ParameterSet<f32>;
    /// Dropout probability for trainable parts.
    fn dropout(&self) -> f64;
    /// Scalar training loss of one batch.
    fn batch_loss(&self, g: &mut Graph<f32>, batch: &Self::Batch, drop: &mut Dropout) -> Result<Var>;
    fn evaluate(&self, with_bleu: bool) -> Result<Evaluation>;
    /// Called after every epoch; fails if an invariant was broken.
    fn audit(&self) -> Result<()> {
        Ok(())
    }
}

fn diverged(reason: String, log: &RunLog) -> Error {
    Error::Divergence {
        reason,
        curve: log.loss_curve(),
    }
}

/// Mixes the run seed with a step counter for per-step dropout streams.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Scales all gradients so their global L2 norm is at most `max`; returns
/// the norm before clipping.
pub fn clip_grad_norm(ps: &mut ParameterSet<f32>, max: f64) -> f64 {
    let norm = ps
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = (max / norm) as f32;
        for (_, t) in ps.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}

/// Adam over `batches` in a seeded shuffled order per epoch, with
/// validation-loss early stopping. The best evaluated parameters are
/// restored before returning.
pub fn fit<O: Objective>(obj: &mut O, batches: &[O::Batch], cfg: &TrainConfig) -> Result<RunLog> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(config("no training batches"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::default();
    let mut log = RunLog::default();
    let mut best: Option<(f64, ParameterSet<f32>)> = None;
    let mut bad = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        let mut capped = false;
        for &bi in &order {
            step += 1;
            let lr = lr_at(step, cfg);
            let mut g = Graph::new();
            let mut drop = Dropout::new(obj.dropout(), step_seed(cfg.seed, step));
            let loss = obj.batch_loss(&mut g, &batches[bi], &mut drop)?;
            let value = g.value(loss)[0] as f64;
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: value,
                lr,
            });
            if !value.is_finite() {
                return Err(diverged(format!("non-finite training loss at step {step}"), &log));
            }
            g.backward(loss)?;
            let ps = obj.trainable_mut();
            ps.zero_grads();
            ps.absorb_grads(&g);
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(ps, max);
            }
            opt.step(ps, lr)?;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                capped = true;
                break;
            }
        }
        obj.audit()?;
        let last = capped || epoch + 1 == cfg.max_epochs;
        if (epoch + 1) % cfg.eval_every != 0 && !last {
            continue;
        }
        let ev = obj.evaluate(cfg.eval_bleu)?;
        if !ev.val_loss.is_finite() {
            return Err(diverged(format!("non-finite validation loss after epoch {epoch}"), &log));
        }
        log.evals.push(EvalRecord {
            step,
            epoch,
            val_loss: ev.val_loss,
            bleu: ev.bleu,
            chrf2: ev.chrf2,
        });
        if best.as_ref().is_none_or(|(b, _)| ev.val_loss < *b) {
            best = Some((ev.val_loss, obj.trainable().clone()));
            log.best_eval = Some(log.evals.len() - 1);
            bad = 0;
        } else {
            bad += 1;
            if bad >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
        if capped {
            break;
        }
    }
    if let Some((_, params)) = best {
        obj.trainable_mut().load_values(&params)?;
    }
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig {
            warmup_steps: 100,
            peak_lr: 2e-4,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 2e-4);
        assert!((lr_at(400, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(50, &cfg) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig {
                warmup_steps: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    /// Fits `w` towards a target; validation losses are scripted.
    struct Scripted {
        ps: ParameterSet<f32>,
        val: Vec<f64>,
        evals: std::cell::Cell<usize>,
    }

    impl Objective for Scripted {
        type Batch = f32;
        fn trainable(&self) -> &ParameterSet<f32> {
            &self.ps
        }
        fn trainable_mut(&mut self) -> &mut ParameterSet<f32> {
            &mut self.ps
        }
        fn dropout(&self) -> f64 {
            0.0
        }
        fn batch_loss(&self, g: &mut Graph<f32>, target: &f32, _: &mut Dropout) -> Result<Var> {
            let w = self.ps.var(g, "w")?;
            let t = g.input(&[1], vec![-target], false)?;
            let d = g.add(w, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        }
        fn evaluate(&self, _: bool) -> Result<Evaluation> {
            let i = self.evals.get();
            self.evals.set(i + 1);
            Ok(Evaluation {
                val_loss: self.val[i.min(self.val.len() - 1)],
                bleu: None,
                chrf2: None,
            })
        }
    }

    fn scripted(val: Vec<f64>) -> Scripted {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap());
        Scripted {
            ps,
            val,
            evals: std::cell::Cell::new(0),
        }
    }

    #[test]
    fn patience_one_stops_after_second_worse_eval() {
        let mut obj = scripted(vec![1.0, 2.0, 3.0, 4.0]);
        let cfg = TrainConfig {
            patience: 1,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        let log = fit(&mut obj, &[1.0], &cfg).unwrap();
        assert_eq!(log.evals.len(), 2);
        assert!(log.stopped_early);
        assert_eq!(log.best_eval, Some(0));
    }

    #[test]
    fn best_parameters_are_restored() {
        let mut obj = scripted(vec![3.0, 1.0, 2.0, 2.5]);
        let cfg = TrainConfig {
            patience: 2,
            warmup_steps: 1,
            peak_lr: 0.1,
            ..TrainConfig::default()
        };
        let log = fit(&mut obj, &[1.0], &cfg).unwrap();
        assert_eq!(log.best_eval, Some(1));
        let best = log.best().unwrap().val_loss;
        assert_eq!(best, log.evals.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min));
        // Two steps of lr 0.1, 0.1/sqrt(2) from w = 0 towards 1.
        let w = obj.ps.get("w").unwrap().data()[0];
        assert!(w > 0.1 && w < 0.3, "w = {w}");
    }

    #[test]
    fn lr_trace_matches_schedule_and_runs_repeat() {
        let cfg = TrainConfig {
            max_epochs: 3,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let mut a = scripted(vec![1.0]);
        let mut b = scripted(vec![1.0]);
        let la = fit(&mut a, &[1.0, 2.0, 0.5], &cfg).unwrap();
        let lb = fit(&mut b, &[1.0, 2.0, 0.5], &cfg).unwrap();
        assert!(la.steps.iter().all(|s| s.lr == lr_at(s.step, &cfg)));
        assert!(la.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert!(la.matches(&lb, 0.0));
    }

    #[test]
    fn non_finite_loss_aborts_with_curve() {
        let mut obj = scripted(vec![1.0]);
        let err = fit(&mut obj, &[f32::INFINITY], &TrainConfig::default()).unwrap_err();
        match err {
            Error::Divergence { curve, .. } => assert_eq!(curve.len(), 1),
            e => panic!("unexpected {e}"),
        }
    }
}
