//! Finite-difference gradient oracle shared by the integration suites.
//!
//! Independent of the reverse-mode engine: it only ever evaluates forward
//! passes, in `f64`, and differences them.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stalign::nn::ParameterSet;
use stalign::{Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// element contributes a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.value(out).len();
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = g.mul_const(out, w)?;
    Ok(g.sum(p))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// Central differences over every element of every input, compared with the
/// analytic gradient from one backward pass.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad(true)))
        .collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
        let loss = build(&mut g, &vars).expect("forward");
        g.value(loss)[0]
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + H;
            let up = eval(&work);
            work[ti].data_mut()[ei] = orig - H;
            let down = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[ti][ei];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (ti, ei, a, numeric);
            }
        }
    }
    report
}

/// Finite differences over selected elements of named parameters.
/// `analytic` holds the gradient slots filled by one backward pass and
/// `loss_of` evaluates the full forward pass for a parameter set.
pub fn gradcheck_params<F>(
    analytic: &ParameterSet<f64>,
    picks: &[(String, Vec<usize>)],
    loss_of: F,
) -> GradReport
where
    F: Fn(&ParameterSet<f64>) -> f64,
{
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work = analytic.clone();
    for (ni, (name, elems)) in picks.iter().enumerate() {
        let grad = analytic.get(name).unwrap().grad.clone();
        for &ei in elems {
            let orig = analytic.get(name).unwrap().data()[ei];
            work.get_mut(name).unwrap().data_mut()[ei] = orig + H;
            let up = loss_of(&work);
            work.get_mut(name).unwrap().data_mut()[ei] = orig - H;
            let down = loss_of(&work);
            work.get_mut(name).unwrap().data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = grad.as_ref().map_or(0.0, |g| g[ei]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (ni, ei, a, numeric);
            }
        }
    }
    report
}

/// Up to `per_tensor` evenly spaced element indices of every tensor whose
/// name passes `filter`.
pub fn pick_elements(
    ps: &ParameterSet<f64>,
    per_tensor: usize,
    filter: impl Fn(&str) -> bool,
) -> Vec<(String, Vec<usize>)> {
    ps.iter()
        .filter(|(n, _)| filter(n))
        .map(|(n, t)| {
            let step = (t.numel() / per_tensor).max(1);
            let idx = (0..t.numel()).step_by(step).take(per_tensor).collect();
            (n.to_string(), idx)
        })
        .collect()
}
