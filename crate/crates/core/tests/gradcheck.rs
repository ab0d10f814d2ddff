//! Finite-difference oracle suite: every differentiable tensor op, then the
//! full tiny-config reconstruction loss, checked at 10 seeded points each
//! (64-bit, h = 1e-5, relative error below 1e-4).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use patchtrad::model::{self, AttentionScale, ModelConfig};
use patchtrad::patch::PatchConfig;
use patchtrad::tensor::check::check_gradients;
use patchtrad::tensor::graph::{Graph, Var};
use patchtrad::tensor::Tensor;
use patchtrad::train::training_loss;
use patchtrad::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const POINTS: u64 = 10;

fn draw(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
    )
    .unwrap()
}

/// Wraps an op output in a fixed random cotangent (elementwise weights, then
/// a sum) so a non-trivial adjoint flows back through the op under test.
fn weighted_sum(g: &Graph<f64>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let weights = g.constant(draw(&shape, rng));
    let weighted = g.mul(out, weights)?;
    g.sum(weighted)
}

/// Runs one op builder at `POINTS` seeded random points.
fn check_op<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ (point << 8));
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|shape| draw(shape, &mut rng)).collect();
        let cot_rng = ChaCha8Rng::seed_from_u64(0xBEEF ^ point);
        let wrapped = |g: &Graph<f64>, vars: &[Var]| -> Result<Var> {
            let out = build(g, vars)?;
            weighted_sum(g, out, &mut cot_rng.clone())
        };
        if let Err(msg) = check_gradients(wrapped, &inputs, 1234 + point, H, TOL) {
            panic!("{name} failed the finite-difference check at point {point}: {msg}");
        }
    }
}

#[test]
fn add_gradients() {
    check_op("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
}

#[test]
fn add_broadcast_gradients() {
    check_op("add_broadcast", &[&[2, 3, 4], &[3, 4]], |g, v| {
        g.add_broadcast(v[0], v[1])
    });
}

#[test]
fn mul_gradients() {
    check_op("mul", &[&[4, 3], &[4, 3]], |g, v| g.mul(v[0], v[1]));
}

#[test]
fn scale_gradients() {
    check_op("scale", &[&[2, 5]], |g, v| g.scale(v[0], -1.75));
}

#[test]
fn matmul_broadcast_gradients() {
    check_op(
        "matmul (tensor x matrix)",
        &[&[2, 3, 4], &[4, 5]],
        |g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn matmul_batched_gradients() {
    check_op(
        "matmul (batched)",
        &[&[2, 2, 3, 4], &[2, 2, 4, 3]],
        |g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn reshape_gradients() {
    check_op("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], vec![3, 4]));
}

#[test]
fn permute_gradients() {
    check_op("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
}

#[test]
fn narrow_gradients() {
    check_op("narrow", &[&[3, 5, 2]], |g, v| g.narrow(v[0], 1, 1, 3));
}

#[test]
fn concat_gradients() {
    check_op("concat", &[&[2, 2, 3], &[2, 1, 3], &[2, 3, 3]], |g, v| {
        g.concat(v, 1)
    });
}

#[test]
fn softmax_gradients() {
    check_op("softmax_lastdim", &[&[3, 6]], |g, v| {
        g.softmax_lastdim(v[0])
    });
}

#[test]
fn gelu_gradients() {
    check_op("gelu", &[&[4, 5]], |g, v| g.gelu(v[0]));
}

#[test]
fn dropout_gradients() {
    // The fixed graph seed pins the mask, so the probed function is smooth.
    check_op("dropout", &[&[6, 8]], |g, v| g.dropout(v[0], 0.35, true));
}

#[test]
fn batchnorm_train_gradients() {
    check_op("batchnorm (training)", &[&[12, 3], &[3], &[3]], |g, v| {
        let mut mean = vec![0.0; 3];
        let mut var = vec![1.0; 3];
        g.batchnorm_train(v[0], v[1], v[2], &mut mean, &mut var, 0.1, 1e-5)
    });
}

#[test]
fn batchnorm_eval_gradients() {
    check_op("batchnorm (eval)", &[&[8, 3], &[3], &[3]], |g, v| {
        g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.05], &[0.9, 1.4, 0.7], 1e-5)
    });
}

#[test]
fn sum_gradients() {
    check_op("sum", &[&[7]], |g, v| g.sum(v[0]));
}

#[test]
fn sse_gradients() {
    check_op("sum_squared_error", &[&[3, 4], &[3, 4]], |g, v| {
        g.sum_squared_error(v[0], v[1])
    });
}

/// The whole-network oracle: every learnable parameter of a tiny model
/// (single layer, single head) against central differences of the
/// reconstruction loss, in training mode with dropout disabled.
#[test]
fn full_model_loss_gradients() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 1,
        d_k: 8,
        d_v: 8,
        n_layers: 1,
        ffn_mult: 2,
        dropout_p: 0.0,
        attention_scale: AttentionScale::DModel,
        patch: PatchConfig::new(8, 4, 2).unwrap(),
        n_modalities: 1,
    };
    let template = model::init_model::<f64>(&cfg, 314).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let window = draw(&[1, 1, cfg.patch.window_len()], &mut rng);

    let inputs: Vec<Tensor<f64>> = {
        let mut t = template.clone();
        t.learnable_mut()
            .iter()
            .map(|(_, p)| (**p).clone())
            .collect()
    };

    // The graph leaves are authoritative for every learnable; the cloned
    // state only supplies the fixed positional encoding and running stats.
    let build = |g: &Graph<f64>, vars: &[Var]| -> Result<Var> {
        let mut probe = template.clone();
        let bound = probe.vars_from_learnables(g, vars)?;
        let (x_p, recon) = probe.forward_train(g, &bound, &window)?;
        training_loss(g, x_p, recon)
    };
    match check_gradients(build, &inputs, 9, H, TOL) {
        Ok(err) => assert!(err < TOL),
        Err(msg) => panic!("full model loss failed the finite-difference check: {msg}"),
    }
}
