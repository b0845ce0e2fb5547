//! Analytic gradients of every differentiable op against central finite
//! differences in f64, each on several shapes.

mod common;

use common::{gradcheck, project, rand_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stalign::Tensor;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_ok(name: &str, r: common::GradReport) {
    assert!(
        r.max_rel_err < TOL,
        "{name}: max rel err {:.3e} at {:?} over {} elements",
        r.max_rel_err,
        r.worst,
        r.checked
    );
}

#[test]
fn matmul_gradient() {
    for (i, (m, k, n)) in [(3, 4, 2), (1, 5, 3), (4, 2, 6)].into_iter().enumerate() {
        let mut r = rng(i as u64);
        let a = rand_tensor(&mut r, &[m, k], 1.0);
        let b = rand_tensor(&mut r, &[k, n], 1.0);
        assert_ok("matmul", gradcheck(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 7)
        }));
    }
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut r = rng(11);
    let a = rand_tensor(&mut r, &[3, 4], 1.0);
    let b = rand_tensor(&mut r, &[4, 2], 1.0);
    assert_ok("matmul-sum", gradcheck(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        Ok(g.sum(y))
    }));
}

#[test]
fn batch_matmul_gradient() {
    for (i, trans_b) in [false, true].into_iter().enumerate() {
        for (j, (bt, m, k, n)) in [(2, 3, 4, 2), (3, 1, 2, 5), (1, 4, 3, 3)].into_iter().enumerate() {
            let mut r = rng((i * 10 + j) as u64);
            let a = rand_tensor(&mut r, &[bt, m, k], 1.0);
            let b = if trans_b {
                rand_tensor(&mut r, &[bt, n, k], 1.0)
            } else {
                rand_tensor(&mut r, &[bt, k, n], 1.0)
            };
            assert_ok("batch_matmul", gradcheck(&[a, b], |g, v| {
                let y = g.batch_matmul(v[0], v[1], trans_b)?;
                project(g, y, 3)
            }));
        }
    }
}

#[test]
fn elementwise_gradients() {
    for (i, shape) in [vec![5], vec![2, 3], vec![2, 2, 3]].into_iter().enumerate() {
        let mut r = rng(20 + i as u64);
        let a = rand_tensor(&mut r, &shape, 1.0);
        let b = rand_tensor(&mut r, &shape, 1.0);
        assert_ok("add", gradcheck(&[a.clone(), b.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 1)
        }));
        assert_ok("mul", gradcheck(&[a.clone(), b.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 2)
        }));
        assert_ok("scale", gradcheck(&[a.clone()], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y, 3)
        }));
        assert_ok("gelu", gradcheck(&[a.clone()], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, 4)
        }));
        assert_ok("mean", gradcheck(&[a.clone()], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        }));
        // keep relu inputs away from the kink
        let shifted = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().map(|&x| if x.abs() < 0.05 { x + 0.2 } else { x }).collect(),
        )
        .unwrap();
        assert_ok("relu", gradcheck(&[shifted], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 5)
        }));
    }
}

#[test]
fn add_bias_gradient() {
    for (i, shape) in [vec![3, 4], vec![2, 3, 4], vec![1, 4]].into_iter().enumerate() {
        let mut r = rng(30 + i as u64);
        let x = rand_tensor(&mut r, &shape, 1.0);
        let b = rand_tensor(&mut r, &[4], 1.0);
        assert_ok("add_bias", gradcheck(&[x, b], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            project(g, y, 6)
        }));
    }
}

#[test]
fn softmax_gradient_every_axis() {
    for (i, (shape, axis)) in [(vec![4], 0), (vec![3, 5], 1), (vec![2, 3, 4], 1), (vec![2, 3, 4], 0)]
        .into_iter()
        .enumerate()
    {
        let mut r = rng(40 + i as u64);
        let x = rand_tensor(&mut r, &shape, 2.0);
        assert_ok("softmax", gradcheck(&[x], |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, 8)
        }));
    }
}

#[test]
fn layer_norm_gradient() {
    for (i, shape) in [vec![2, 5], vec![3, 2, 4], vec![1, 8]].into_iter().enumerate() {
        let d = *shape.last().unwrap();
        let mut r = rng(50 + i as u64);
        let x = rand_tensor(&mut r, &shape, 1.5);
        let gain = rand_tensor(&mut r, &[d], 1.0);
        let bias = rand_tensor(&mut r, &[d], 1.0);
        assert_ok("layer_norm", gradcheck(&[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 9)
        }));
    }
}

#[test]
fn conv1d_gradient() {
    let cases = [
        (vec![3, 9], 2, 3, 2, 1),
        (vec![2, 2, 7], 4, 3, 1, 0),
        (vec![1, 3, 10], 2, 5, 2, 2),
    ];
    for (i, (xs, c_out, k, s, p)) in cases.into_iter().enumerate() {
        let c_in = xs[xs.len() - 2];
        let mut r = rng(60 + i as u64);
        let x = rand_tensor(&mut r, &xs, 1.0);
        let w = rand_tensor(&mut r, &[c_out, c_in, k], 1.0);
        let b = rand_tensor(&mut r, &[c_out], 1.0);
        assert_ok("conv1d", gradcheck(&[x, w, b], |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), s, p)?;
            project(g, y, 10)
        }));
    }
}

#[test]
fn shape_op_gradients() {
    let mut r = rng(70);
    let x = rand_tensor(&mut r, &[2, 3, 4], 1.0);
    let y = rand_tensor(&mut r, &[2, 1, 4], 1.0);
    assert_ok("permute", gradcheck(&[x.clone()], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        project(g, p, 11)
    }));
    assert_ok("reshape", gradcheck(&[x.clone()], |g, v| {
        let p = g.reshape(v[0], &[6, 4])?;
        let p = g.gelu(p);
        project(g, p, 12)
    }));
    assert_ok("concat", gradcheck(&[x, y], |g, v| {
        let p = g.concat(&[v[1], v[0]], 1)?;
        project(g, p, 13)
    }));
}

#[test]
fn embedding_gradient_scatters_into_used_rows() {
    let mut r = rng(80);
    let table = rand_tensor(&mut r, &[6, 3], 1.0);
    let ids = [4usize, 1, 4, 0];
    assert_ok("embedding", gradcheck(&[table.clone()], |g, v| {
        let e = g.embedding(v[0], &ids)?;
        project(g, e, 14)
    }));
    let mut g = stalign::Graph::new();
    let t = g.leaf(&table.with_grad(true));
    let e = g.embedding(t, &ids).unwrap();
    let l = g.sum(e);
    g.backward(l).unwrap();
    let grad = g.grad(t).unwrap();
    for row in 0..6 {
        let used = ids.iter().filter(|&&i| i == row).count() as f64;
        assert!(grad[row * 3..row * 3 + 3].iter().all(|&v| v == used));
    }
}

#[test]
fn cross_entropy_gradient() {
    for (i, (n, v)) in [(3, 5), (4, 8), (1, 3)].into_iter().enumerate() {
        let mut r = rng(90 + i as u64);
        let logits = rand_tensor(&mut r, &[n, v], 2.0);
        let targets: Vec<usize> = (0..n).map(|j| if j == 1 { 99 } else { (j * 3) % v }).collect();
        assert_ok("cross_entropy", gradcheck(&[logits], |g, vars| {
            g.cross_entropy(vars[0], &targets, 99)
        }));
    }
}

#[test]
fn masked_softmax_row_gradient_is_zero() {
    let mut g = stalign::Graph::<f64>::new();
    let x = g.input(&[2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.1, 0.2], true).unwrap();
    let m = g
        .input(&[2, 3], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY], false)
        .unwrap();
    let s = g.add(x, m).unwrap();
    let p = g.softmax(s, 1).unwrap();
    assert_eq!(&g.value(p)[..3], &[0.0, 0.0, 0.0]);
    let l = project(&mut g, p, 3).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(x).unwrap();
    assert!(grad[..3].iter().all(|&v| v == 0.0));
    assert!(grad.iter().all(|v| v.is_finite()));
}
