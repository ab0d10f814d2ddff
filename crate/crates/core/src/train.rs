//! Training loop: sliding windows over the (already normalized) training
//! series, shuffled into mini-batches, optimized with Adam against the summed
//! squared patch-reconstruction error.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelState};
use crate::tensor::graph::Graph;
use crate::tensor::{lit, ops, Scalar, Tensor};

/// Optimization hyperparameters. Adam with the conventional betas/epsilon and
/// no learning-rate schedule; training windows slide with `window_stride`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub window_stride: usize,
    /// Global-norm gradient clipping; off by default.
    pub clip_max_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            window_stride: 1,
            clip_max_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.window_stride == 0 {
            return Err(Error::Config("window_stride must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.adam_eps <= 0.0 || self.adam_eps.is_nan() {
            return Err(Error::Config(format!(
                "adam_eps must be positive, got {}",
                self.adam_eps
            )));
        }
        if let Some(clip) = self.clip_max_norm {
            if clip <= 0.0 || clip.is_nan() {
                return Err(Error::Config(format!(
                    "clip_max_norm must be positive, got {clip}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Default)]
pub struct AdamState<T> {
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            moments: HashMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction over named parameters. Every
/// parameter must have a gradient; a missing one is a contract violation.
pub fn adam_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &HashMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let beta1 = lit::<T>(cfg.adam_beta1);
    let beta2 = lit::<T>(cfg.adam_beta2);
    let one = T::one();
    let eps = lit::<T>(cfg.adam_eps);
    let lr = lit::<T>(cfg.learning_rate);
    let corr1 = one - lit::<T>(cfg.adam_beta1.powi(t as i32));
    let corr2 = one - lit::<T>(cfg.adam_beta2.powi(t as i32));

    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::Numeric(format!("missing gradient for parameter '{name}'")))?;
        if grad.shape() != param.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter '{name}' {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![T::zero(); param.len()], vec![T::zero(); param.len()]));
        for ((p, &g), (m_i, v_i)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m_i = beta1 * *m_i + (one - beta1) * g;
            *v_i = beta2 * *v_i + (one - beta2) * g * g;
            let m_hat = *m_i / corr1;
            let v_hat = *v_i / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales all gradients by `max_norm / global_norm` when the global L2 norm
/// exceeds `max_norm`.
fn clip_gradients<T: Scalar>(grads: &mut HashMap<String, Tensor<T>>, max_norm: f64) {
    let mut total = 0f64;
    for grad in grads.values() {
        for &g in grad.data() {
            let g = g.to_f64().expect("finite");
            total += g * g;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let factor = lit::<T>(max_norm / norm);
        for grad in grads.values_mut() {
            for g in grad.data_mut() {
                *g = *g * factor;
            }
        }
    }
}

/// Mean per-window loss for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Differentiable training objective on a graph: total squared error between
/// the input patches and their reconstruction.
pub use crate::tensor::graph::Var;

pub fn training_loss<T: Scalar>(g: &Graph<T>, x_p: Var, recon: Var) -> Result<Var> {
    g.sum_squared_error(x_p, recon)
}

/// Plain (non-differentiable) counterpart of [`training_loss`] over tensors.
pub fn reconstruction_sse<T: Scalar>(x_p: &Tensor<T>, recon: &Tensor<T>) -> Result<f64> {
    Ok(ops::sum_squared_error(x_p, recon)?
        .to_f64()
        .expect("finite"))
}

fn window_starts(series_len: usize, window_len: usize, stride: usize) -> Vec<usize> {
    (0..=series_len - window_len).step_by(stride).collect()
}

/// Trains a fresh model on a normalized series. Returns the final state and
/// the per-epoch mean window loss. Deterministic for a fixed config.
pub fn train(
    series: &TimeSeries,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelState<f32>, Vec<EpochLoss>)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if series.n_modalities() != model_cfg.n_modalities {
        return Err(Error::Data(format!(
            "series has {} modalities but the model expects {}",
            series.n_modalities(),
            model_cfg.n_modalities
        )));
    }
    let window_len = model_cfg.patch.window_len();
    if series.len() < window_len {
        return Err(Error::Data(format!(
            "series of length {} cannot produce a window of {window_len}",
            series.len()
        )));
    }
    let mut state = init_model::<f32>(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5u64 << 32));
    let mut graph_seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9u64 << 32));
    let starts = window_starts(series.len(), window_len, cfg.window_stride);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = starts.clone();
        order.shuffle(&mut shuffle_rng);
        let mut sse_total = 0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let windows = series.window_batch(chunk, window_len)?;
            let g = Graph::new(graph_seed_rng.random());
            let vars = state.bind(&g, true);
            let (x_p, recon) = state.forward_train(&g, &vars, &windows)?;
            let sse = training_loss(&g, x_p, recon)?;
            let loss = g.scale(sse, 1.0 / chunk.len() as f32)?;
            g.ensure_finite(loss, "batch loss")?;
            sse_total += g.scalar_value(sse)?;
            g.backward(loss)?;

            let mut grads = HashMap::new();
            for (name, var) in vars.learnable_named() {
                let grad = g.grad(var).ok_or_else(|| {
                    Error::Numeric(format!("missing gradient for parameter '{name}'"))
                })?;
                grads.insert(name, grad);
            }
            if let Some(max_norm) = cfg.clip_max_norm {
                clip_gradients(&mut grads, max_norm);
            }
            let mut params = state.learnable_mut();
            adam_step(&mut params, &grads, &mut adam, cfg)?;
        }
        log.push(EpochLoss {
            epoch,
            mean_loss: sse_total / starts.len() as f64,
        });
    }
    Ok((state, log))
}

/// Mean per-window loss of a frozen model over a series (eval mode, batched).
pub fn mean_loss(state: &ModelState<f32>, series: &TimeSeries, batch_size: usize) -> Result<f64> {
    let window_len = state.cfg.patch.window_len();
    if series.len() < window_len {
        return Err(Error::Data(format!(
            "series of length {} cannot produce a window of {window_len}",
            series.len()
        )));
    }
    let starts = window_starts(series.len(), window_len, 1);
    let mut total = 0f64;
    for chunk in starts.chunks(batch_size.max(1)) {
        let windows = series.window_batch(chunk, window_len)?;
        let g = Graph::new(0);
        let vars = state.bind(&g, false);
        let (x_p, recon) = state.forward_eval(&g, &vars, &windows)?;
        total += g.scalar_value(training_loss(&g, x_p, recon)?)?;
    }
    Ok(total / starts.len() as f64)
}
