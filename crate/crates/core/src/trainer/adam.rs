use std::collections::BTreeMap;

use crate::error::{contract, Result};
use crate::nn::ParameterSet;
use crate::tensor::Element;

/// Adam with bias correction. Frozen parameters and parameters without a
/// gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.98, 1e-9)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Element>(&mut self, ps: &mut ParameterSet<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let frozen = ps.frozen().clone();
        for (name, p) in ps.iter_mut() {
            if frozen.contains(name) || !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let n = p.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || grad.len() != n {
                return Err(contract(format!(
                    "optimizer state for `{name}` has {} elements, parameter has {n}",
                    m.len()
                )));
            }
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64_lossy();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let upd = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - upd);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
