//! Finite-difference gradient checking utilities.
//!
//! These run in f64 and are the independent oracle for every differentiable
//! op: build the same scalar function twice, once through the tape and once
//! through central differences, and compare.

use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error with a small-magnitude floor: below `1e-3` the comparison
/// degrades to an absolute tolerance, which matches the noise floor of
/// central differences at `h = 1e-5` in f64.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Largest elementwise [`relative_error`] between two gradients.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Compares tape gradients against central finite differences for a scalar
/// loss built from the given leaf inputs. `build` runs on a fresh graph for
/// every probe; the fixed `graph_seed` keeps stochastic ops (dropout)
/// identical across evaluations. Returns the worst relative error on success.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor<f64>],
    graph_seed: u64,
    h: f64,
    tol: f64,
) -> std::result::Result<f64, String>
where
    F: Fn(&Graph<f64>, &[Var]) -> crate::error::Result<Var>,
{
    let g = Graph::new(graph_seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&g, &vars).map_err(|e| format!("forward failed: {e}"))?;
    g.backward(loss)
        .map_err(|e| format!("backward failed: {e}"))?;
    let mut tape_grads = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let grad = g
            .grad(*v)
            .ok_or_else(|| format!("input {i} received no gradient"))?;
        tape_grads.extend_from_slice(grad.data());
    }

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let f = |x: &[f64]| -> f64 {
        let g = Graph::new(graph_seed);
        let mut offset = 0usize;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let t = Tensor::from_vec(shape.clone(), x[offset..offset + n].to_vec())
                    .expect("probe shape matches");
                offset += n;
                g.leaf(t, true)
            })
            .collect();
        let loss = build(&g, &vars).expect("forward succeeded on the base point");
        g.scalar_value(loss).expect("loss is scalar")
    };
    let fd_grads = central_diff_gradient(f, &flat, h);
    let err = max_relative_error(&tape_grads, &fd_grads);
    if err < tol {
        Ok(err)
    } else {
        Err(format!(
            "max relative error {err:.3e} is not below {tol:.0e}"
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_known_derivative() {
        // f(x) = x0^2 + 3 x1, grad = (2 x0, 3).
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_diff_gradient(f, &[1.5, -2.0], 1e-5);
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floors_small_magnitudes() {
        assert!(relative_error(0.0, 5e-8) < 1e-4);
        assert!(relative_error(10.0, 10.002) > 1e-4);
    }
}
