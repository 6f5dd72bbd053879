//! Central-difference gradient checking.
//!
//! Runs in the wide (`f64`) mode. The numeric oracle rebuilds the graph from
//! a flat parameter vector for every probe, so it stays independent of the
//! backward implementation it verifies.

use rand::Rng;

use super::{Graph, Real, TensorError, TensorRef};
use crate::rng::stream_rng;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Central differences of a scalar function at `x`.
pub fn numeric_grad<F>(x: &[f64], eps: f64, f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Worst relative error between analytic and numeric gradients.
///
/// The denominator is floored at 1e-3 so near-zero entries are compared
/// absolutely instead of amplifying finite-difference noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Check the gradient of a graph-building closure.
///
/// `build` receives the flat parameter vector and must return the parameter
/// tensors (in the order they consume the vector) plus a scalar loss.
pub fn check_fn<F>(name: &str, theta: &[f64], eps: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[f64]) -> Result<(Vec<TensorRef>, TensorRef), TensorError>,
{
    let mut graph = Graph::new();
    let (params, loss) = build(&mut graph, theta).expect("gradcheck build");
    graph.backward(loss).expect("gradcheck backward");
    let mut analytic = Vec::with_capacity(theta.len());
    for p in &params {
        analytic.extend_from_slice(graph.grad(*p).expect("param grad"));
    }
    assert_eq!(analytic.len(), theta.len(), "{name}: params must cover theta");

    let numeric = numeric_grad(theta, eps, |t| {
        let mut g = Graph::new();
        let (_, loss) = build(&mut g, t).expect("gradcheck rebuild");
        g.data(loss)[0]
    });
    GradCheck {
        name: name.to_string(),
        max_rel_err: max_rel_err(&analytic, &numeric),
        entries: theta.len(),
    }
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked activations.
fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Mix an output tensor with fixed random weights into a scalar loss, so the
/// upstream gradient is non-uniform.
fn mix_loss(
    g: &mut Graph<f64>,
    out: TensorRef,
    weights: &[f64],
) -> Result<TensorRef, TensorError> {
    let w = g.input(g.shape(out).to_vec(), weights.to_vec())?;
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

const EPS: f64 = 1e-5;

/// Gradient checks for every differentiable operation, on seeded random
/// inputs. Returns one report per check; all should be far below 1e-4.
pub fn run_op_suite(seed: u64) -> Vec<GradCheck> {
    let mut rng = stream_rng(seed, "gradcheck-ops", 0);
    let mut out = Vec::new();

    // matmul 4x3 @ 3x2
    {
        let theta = uniform(&mut rng, 4 * 3 + 3 * 2, -1.0, 1.0);
        let w = uniform(&mut rng, 4 * 2, -1.0, 1.0);
        out.push(check_fn("matmul", &theta, EPS, |g, t| {
            let a = g.param(vec![4, 3], t[..12].to_vec())?;
            let b = g.param(vec![3, 2], t[12..].to_vec())?;
            let y = g.matmul(a, b)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![a, b], loss))
        }));
    }
    // batched matmul [2,3,4] @ [2,4,2]
    {
        let theta = uniform(&mut rng, 24 + 16, -1.0, 1.0);
        let w = uniform(&mut rng, 12, -1.0, 1.0);
        out.push(check_fn("matmul_batched", &theta, EPS, |g, t| {
            let a = g.param(vec![2, 3, 4], t[..24].to_vec())?;
            let b = g.param(vec![2, 4, 2], t[24..].to_vec())?;
            let y = g.matmul(a, b)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![a, b], loss))
        }));
    }
    // broadcast matmul [2,3,4] @ [4,2]
    {
        let theta = uniform(&mut rng, 24 + 8, -1.0, 1.0);
        let w = uniform(&mut rng, 12, -1.0, 1.0);
        out.push(check_fn("matmul_broadcast", &theta, EPS, |g, t| {
            let a = g.param(vec![2, 3, 4], t[..24].to_vec())?;
            let b = g.param(vec![4, 2], t[24..].to_vec())?;
            let y = g.matmul(a, b)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![a, b], loss))
        }));
    }
    // matmul_nt 4x3 @ (2x3)^T
    {
        let theta = uniform(&mut rng, 12 + 6, -1.0, 1.0);
        let w = uniform(&mut rng, 8, -1.0, 1.0);
        out.push(check_fn("matmul_nt", &theta, EPS, |g, t| {
            let a = g.param(vec![4, 3], t[..12].to_vec())?;
            let b = g.param(vec![2, 3], t[12..].to_vec())?;
            let y = g.matmul_nt(a, b)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![a, b], loss))
        }));
    }
    // add + mul + mul_scalar
    {
        let theta = uniform(&mut rng, 12, -1.0, 1.0);
        let w = uniform(&mut rng, 6, -1.0, 1.0);
        out.push(check_fn("add_mul", &theta, EPS, |g, t| {
            let a = g.param(vec![2, 3], t[..6].to_vec())?;
            let b = g.param(vec![2, 3], t[6..].to_vec())?;
            let s = g.add(a, b)?;
            let p = g.mul(s, a)?;
            let p = g.mul_scalar(p, 0.7);
            let loss = mix_loss(g, p, &w)?;
            Ok((vec![a, b], loss))
        }));
    }
    // add_bias [4,3] + [3]
    {
        let theta = uniform(&mut rng, 12 + 3, -1.0, 1.0);
        let w = uniform(&mut rng, 12, -1.0, 1.0);
        out.push(check_fn("add_bias", &theta, EPS, |g, t| {
            let x = g.param(vec![4, 3], t[..12].to_vec())?;
            let b = g.param(vec![3], t[12..].to_vec())?;
            let y = g.add_bias(x, b)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![x, b], loss))
        }));
    }
    // relu on 3x5 input bounded away from the kink
    {
        let theta = away_from_zero(&mut rng, 15);
        let w = uniform(&mut rng, 15, -1.0, 1.0);
        out.push(check_fn("relu", &theta, EPS, |g, t| {
            let x = g.param(vec![3, 5], t.to_vec())?;
            let y = g.relu(x);
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![x], loss))
        }));
    }
    // gelu on 3x5 input
    {
        let theta = uniform(&mut rng, 15, -2.0, 2.0);
        let w = uniform(&mut rng, 15, -1.0, 1.0);
        out.push(check_fn("gelu", &theta, EPS, |g, t| {
            let x = g.param(vec![3, 5], t.to_vec())?;
            let y = g.gelu(x);
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![x], loss))
        }));
    }
    // max_reduce over [2,5,3] with well-separated entries
    {
        let mut theta = Vec::with_capacity(30);
        for i in 0..30 {
            theta.push((i as f64 * 0.37) % 3.1 + rng.gen_range(-0.05..0.05));
        }
        let w = uniform(&mut rng, 6, -1.0, 1.0);
        out.push(check_fn("max_reduce", &theta, EPS, |g, t| {
            let x = g.param(vec![2, 5, 3], t.to_vec())?;
            let (y, _) = g.max_reduce(x)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![x], loss))
        }));
    }
    // concat along both axes
    {
        let theta = uniform(&mut rng, 6 + 4, -1.0, 1.0);
        let w = uniform(&mut rng, 10, -1.0, 1.0);
        out.push(check_fn("concat_axis1", &theta, EPS, |g, t| {
            let a = g.param(vec![2, 3], t[..6].to_vec())?;
            let b = g.param(vec![2, 2], t[6..].to_vec())?;
            let y = g.concat(a, b, 1)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![a, b], loss))
        }));
        let theta = uniform(&mut rng, 6 + 3, -1.0, 1.0);
        let w = uniform(&mut rng, 9, -1.0, 1.0);
        out.push(check_fn("concat_axis0", &theta, EPS, |g, t| {
            let a = g.param(vec![2, 3], t[..6].to_vec())?;
            let b = g.param(vec![1, 3], t[6..].to_vec())?;
            let y = g.concat(a, b, 0)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![a, b], loss))
        }));
    }
    // transpose + reshape
    {
        let theta = uniform(&mut rng, 12, -1.0, 1.0);
        let w = uniform(&mut rng, 12, -1.0, 1.0);
        out.push(check_fn("transpose_reshape", &theta, EPS, |g, t| {
            let x = g.param(vec![3, 4], t.to_vec())?;
            let y = g.transpose(x)?;
            let y = g.reshape(y, vec![2, 6])?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![x], loss))
        }));
    }
    // layer_norm on 2x8
    {
        let theta = uniform(&mut rng, 16 + 8 + 8, -1.0, 1.0);
        let w = uniform(&mut rng, 16, -1.0, 1.0);
        out.push(check_fn("layer_norm", &theta, EPS, |g, t| {
            let x = g.param(vec![2, 8], t[..16].to_vec())?;
            let gamma = g.param(vec![8], t[16..24].to_vec())?;
            let beta = g.param(vec![8], t[24..].to_vec())?;
            let y = g.layer_norm(x, gamma, beta, 1e-8)?;
            let loss = mix_loss(g, y, &w)?;
            Ok((vec![x, gamma, beta], loss))
        }));
    }
    // softmax cross-entropy, rank 1 and rank 2
    {
        let theta = uniform(&mut rng, 8, -2.0, 2.0);
        out.push(check_fn("cross_entropy_vec", &theta, EPS, |g, t| {
            let x = g.param(vec![8], t.to_vec())?;
            let loss = g.softmax_cross_entropy(x, 3)?;
            Ok((vec![x], loss))
        }));
        let theta = uniform(&mut rng, 24, -2.0, 2.0);
        out.push(check_fn("cross_entropy_rows", &theta, EPS, |g, t| {
            let x = g.param(vec![3, 8], t.to_vec())?;
            let loss = g.softmax_cross_entropy(x, 5)?;
            Ok((vec![x], loss))
        }));
    }
    // mean_all
    {
        let theta = uniform(&mut rng, 9, -1.0, 1.0);
        out.push(check_fn("mean_all", &theta, EPS, |g, t| {
            let x = g.param(vec![3, 3], t.to_vec())?;
            let y = g.mul(x, x)?;
            let loss = g.mean_all(y);
            Ok((vec![x], loss))
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_at_1e4() {
        for check in run_op_suite(1234) {
            assert!(
                check.max_rel_err < 1e-4,
                "{} failed: max rel err {:.3e} over {} entries",
                check.name,
                check.max_rel_err,
                check.entries
            );
        }
    }
}
