//! The encoder network: linear patch projection with a fixed sinusoidal
//! positional encoding, stacked residual multi-head self-attention layers with
//! GELU/dropout/batchnorm, and a per-modality patch reconstruction head.
//!
//! Channel independence is realized by folding the modality axis into the
//! batch axis for the encoder: every patch row the attention sees belongs to a
//! single modality, and the heads that map encoder output back to patch space
//! are separate per modality.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::patch::{self, PatchConfig};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{lit, Scalar, Tensor};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Divisor inside the attention softmax: `sqrt(d_model)` by default, with
/// `sqrt(d_k)` (the more common transformer convention) behind a switch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionScale {
    #[default]
    #[serde(rename = "d-model")]
    DModel,
    #[serde(rename = "d-k")]
    DK,
}

/// Network hyperparameters plus the patching geometry they are built around.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub dropout_p: f64,
    #[serde(default)]
    pub attention_scale: AttentionScale,
    pub patch: PatchConfig,
    pub n_modalities: usize,
}

impl ModelConfig {
    /// Default hyperparameters around a given patch geometry and modality
    /// count: d_model 64, 4 heads with d_k = d_v = 16, 3 layers, FFN
    /// expansion 2, dropout 0.1.
    pub fn with_defaults(patch: PatchConfig, n_modalities: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            n_layers: 3,
            ffn_mult: 2,
            dropout_p: 0.1,
            attention_scale: AttentionScale::DModel,
            patch,
            n_modalities,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("n_layers", self.n_layers),
            ("ffn_mult", self.ffn_mult),
            ("n_modalities", self.n_modalities),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> Result<usize> {
        self.patch.num_patches()
    }

    fn attention_divisor(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::DModel => self.d_model as f64,
            AttentionScale::DK => self.d_k as f64,
        }
    }
}

/// Batch normalization parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    fn identity(features: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![features], T::one()),
            beta: Tensor::zeros(vec![features]),
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
        }
    }
}

/// One encoder layer: fused multi-head attention projections, the output
/// projection, a two-matrix position-wise FFN, and two post-residual
/// batchnorms.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub bn_attn: BatchNormParams<T>,
    pub bn_ffn: BatchNormParams<T>,
}

/// All model parameters plus the fixed positional encoding and, once fitted,
/// the normalization statistics the model was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub cfg: ModelConfig,
    pub w_proj: Tensor<T>,
    /// Fixed sinusoidal positional encoding; never touched by the optimizer.
    pub w_pe: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub patch_heads: Vec<Tensor<T>>,
    pub normalizer: Option<Normalizer>,
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`; fan-in is the input
/// (row) dimension.
fn scaled_uniform<T: Scalar>(shape: [usize; 2], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let two = lit::<T>(2.0);
    let one = T::one();
    let bound = lit::<T>(1.0 / (shape[0] as f64).sqrt());
    let data = (0..shape[0] * shape[1])
        .map(|_| (T::sample_unit(rng) * two - one) * bound)
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}

/// Standard sinusoidal table over patch positions:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
fn sinusoidal_encoding<T: Scalar>(positions: usize, d_model: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions * d_model);
    for pos in 0..positions {
        for i in 0..d_model {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(pair / d_model as f64);
            data.push(lit::<T>(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(vec![positions, d_model], data).expect("shape matches data")
}

/// Builds a fresh model with deterministic seed-derived weights.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelState<T>> {
    cfg.validate()?;
    let p_num = cfg.num_patches()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let heads_k = cfg.n_heads * cfg.d_k;
    let heads_v = cfg.n_heads * cfg.d_v;
    let ffn = cfg.ffn_mult * d;
    let w_proj = scaled_uniform([cfg.patch.patch_len, d], &mut rng);
    let layers = (0..cfg.n_layers)
        .map(|_| EncoderLayer {
            w_q: scaled_uniform([d, heads_k], &mut rng),
            w_k: scaled_uniform([d, heads_k], &mut rng),
            w_v: scaled_uniform([d, heads_v], &mut rng),
            w_o: scaled_uniform([heads_v, d], &mut rng),
            ffn_w1: scaled_uniform([d, ffn], &mut rng),
            ffn_w2: scaled_uniform([ffn, d], &mut rng),
            bn_attn: BatchNormParams::identity(d),
            bn_ffn: BatchNormParams::identity(d),
        })
        .collect();
    let patch_heads = (0..cfg.n_modalities)
        .map(|_| scaled_uniform([d, cfg.patch.patch_len], &mut rng))
        .collect();
    Ok(ModelState {
        cfg: cfg.clone(),
        w_proj,
        w_pe: sinusoidal_encoding(p_num, d),
        layers,
        patch_heads,
        normalizer: None,
    })
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
    pub bn_attn_gamma: Var,
    pub bn_attn_beta: Var,
    pub bn_ffn_gamma: Var,
    pub bn_ffn_beta: Var,
}

/// Graph handles for every parameter of a bound model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub w_proj: Var,
    pub w_pe: Var,
    pub layers: Vec<LayerVars>,
    pub patch_heads: Vec<Var>,
}

impl ModelVars {
    /// Learnable parameters with their stable names, in checkpoint order.
    /// The positional encoding is fixed and deliberately absent.
    pub fn learnable_named(&self) -> Vec<(String, Var)> {
        let mut out = vec![("w_proj".to_string(), self.w_proj)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, var) in [
                ("w_q", layer.w_q),
                ("w_k", layer.w_k),
                ("w_v", layer.w_v),
                ("w_o", layer.w_o),
                ("ffn_w1", layer.ffn_w1),
                ("ffn_w2", layer.ffn_w2),
                ("bn_attn.gamma", layer.bn_attn_gamma),
                ("bn_attn.beta", layer.bn_attn_beta),
                ("bn_ffn.gamma", layer.bn_ffn_gamma),
                ("bn_ffn.beta", layer.bn_ffn_beta),
            ] {
                out.push((format!("layers.{i}.{field}"), var));
            }
        }
        for (m, &head) in self.patch_heads.iter().enumerate() {
            out.push((format!("patch_heads.{m}"), head));
        }
        out
    }
}

enum BnState<'a, T> {
    Train(&'a mut [EncoderLayer<T>]),
    Eval(&'a [EncoderLayer<T>]),
}

impl<T: Scalar> ModelState<T> {
    /// Registers every parameter on a graph. With `trainable`, learnable
    /// weights accumulate gradients; the positional encoding never does.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> ModelVars {
        ModelVars {
            w_proj: g.leaf(self.w_proj.clone(), trainable),
            w_pe: g.constant(self.w_pe.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    w_q: g.leaf(l.w_q.clone(), trainable),
                    w_k: g.leaf(l.w_k.clone(), trainable),
                    w_v: g.leaf(l.w_v.clone(), trainable),
                    w_o: g.leaf(l.w_o.clone(), trainable),
                    ffn_w1: g.leaf(l.ffn_w1.clone(), trainable),
                    ffn_w2: g.leaf(l.ffn_w2.clone(), trainable),
                    bn_attn_gamma: g.leaf(l.bn_attn.gamma.clone(), trainable),
                    bn_attn_beta: g.leaf(l.bn_attn.beta.clone(), trainable),
                    bn_ffn_gamma: g.leaf(l.bn_ffn.gamma.clone(), trainable),
                    bn_ffn_beta: g.leaf(l.bn_ffn.beta.clone(), trainable),
                })
                .collect(),
            patch_heads: self
                .patch_heads
                .iter()
                .map(|h| g.leaf(h.clone(), trainable))
                .collect(),
        }
    }

    /// Assembles [`ModelVars`] from already-registered leaves (one per
    /// learnable parameter, in [`ModelState::learnable_names`] order) plus a
    /// fresh constant for the positional encoding. Used by gradient checks
    /// that own the leaves themselves.
    pub fn vars_from_learnables(&self, g: &Graph<T>, leaves: &[Var]) -> Result<ModelVars> {
        let expected = 1 + 10 * self.layers.len() + self.patch_heads.len();
        if leaves.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} learnable leaves, got {}",
                leaves.len()
            )));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("count checked above");
        Ok(ModelVars {
            w_proj: next(),
            w_pe: g.constant(self.w_pe.clone()),
            layers: (0..self.layers.len())
                .map(|_| LayerVars {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                    ffn_w1: next(),
                    ffn_w2: next(),
                    bn_attn_gamma: next(),
                    bn_attn_beta: next(),
                    bn_ffn_gamma: next(),
                    bn_ffn_beta: next(),
                })
                .collect(),
            patch_heads: (0..self.patch_heads.len()).map(|_| next()).collect(),
        })
    }

    /// Names of the learnable parameters, in the same order as
    /// [`ModelVars::learnable_named`].
    pub fn learnable_names(&self) -> Vec<String> {
        let mut out = vec!["w_proj".to_string()];
        for i in 0..self.layers.len() {
            for field in [
                "w_q",
                "w_k",
                "w_v",
                "w_o",
                "ffn_w1",
                "ffn_w2",
                "bn_attn.gamma",
                "bn_attn.beta",
                "bn_ffn.gamma",
                "bn_ffn.beta",
            ] {
                out.push(format!("layers.{i}.{field}"));
            }
        }
        for m in 0..self.patch_heads.len() {
            out.push(format!("patch_heads.{m}"));
        }
        out
    }

    /// Mutable references to the learnable parameters paired with their
    /// names, in checkpoint order.
    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("w_proj".to_string(), &mut self.w_proj)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.w_q"), &mut layer.w_q));
            out.push((format!("layers.{i}.w_k"), &mut layer.w_k));
            out.push((format!("layers.{i}.w_v"), &mut layer.w_v));
            out.push((format!("layers.{i}.w_o"), &mut layer.w_o));
            out.push((format!("layers.{i}.ffn_w1"), &mut layer.ffn_w1));
            out.push((format!("layers.{i}.ffn_w2"), &mut layer.ffn_w2));
            out.push((
                format!("layers.{i}.bn_attn.gamma"),
                &mut layer.bn_attn.gamma,
            ));
            out.push((format!("layers.{i}.bn_attn.beta"), &mut layer.bn_attn.beta));
            out.push((format!("layers.{i}.bn_ffn.gamma"), &mut layer.bn_ffn.gamma));
            out.push((format!("layers.{i}.bn_ffn.beta"), &mut layer.bn_ffn.beta));
        }
        for (m, head) in self.patch_heads.iter_mut().enumerate() {
            out.push((format!("patch_heads.{m}"), head));
        }
        out
    }

    /// Training forward pass over a `(B, M, w + 1)` batch. Updates batchnorm
    /// running statistics in place. Returns the constant input patches and
    /// their reconstruction, both `(B, M, p_num, patch_len)`.
    pub fn forward_train(
        &mut self,
        g: &Graph<T>,
        vars: &ModelVars,
        windows: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        let cfg = self.cfg.clone();
        forward_impl(
            &cfg,
            g,
            vars,
            windows,
            true,
            BnState::Train(&mut self.layers),
        )
    }

    /// Inference forward pass; dropout is off and batchnorm uses running
    /// statistics, so the output is a pure function of (windows, state).
    pub fn forward_eval(
        &self,
        g: &Graph<T>,
        vars: &ModelVars,
        windows: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        forward_impl(
            &self.cfg,
            g,
            vars,
            windows,
            false,
            BnState::Eval(&self.layers),
        )
    }
}

/// Patch embedding: project into model space and add the positional table
/// across the folded batch/modality axis.
pub fn embed<T: Scalar>(g: &Graph<T>, x_p: Var, w_proj: Var, w_pe: Var) -> Result<Var> {
    let projected = g.matmul(x_p, w_proj)?;
    g.add_broadcast(projected, w_pe)
}

/// Multi-head self-attention over `(N, P, d_model)`: fused Q/K/V projections
/// split per head, scaled dot-product scores softmaxed over the patch axis,
/// heads merged and projected back. Returns the projected output and the
/// attention probabilities `(N, H, P, P)`.
pub fn self_attention<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    layer: &LayerVars,
    x: Var,
) -> Result<(Var, Var)> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::Shape(format!(
            "attention expects (N, P, {}), got {shape:?}",
            cfg.d_model
        )));
    }
    let (n, p) = (shape[0], shape[1]);
    let (h, dk, dv) = (cfg.n_heads, cfg.d_k, cfg.d_v);

    let split = |t: Var, width: usize| -> Result<Var> {
        let reshaped = g.reshape(t, vec![n, p, h, width])?;
        g.permute(reshaped, &[0, 2, 1, 3])
    };
    let q = split(g.matmul(x, layer.w_q)?, dk)?;
    let k = split(g.matmul(x, layer.w_k)?, dk)?;
    let v = split(g.matmul(x, layer.w_v)?, dv)?;

    let k_t = g.permute(k, &[0, 1, 3, 2])?;
    let scores = g.matmul(q, k_t)?;
    let scaled = g.scale(scores, lit::<T>(1.0 / cfg.attention_divisor().sqrt()))?;
    let probs = g.softmax_lastdim(scaled)?;
    let context = g.matmul(probs, v)?;
    let merged = g.permute(context, &[0, 2, 1, 3])?;
    let merged = g.reshape(merged, vec![n, p, h * dv])?;
    let out = g.matmul(merged, layer.w_o)?;
    Ok((out, probs))
}

fn batchnorm_step<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    bn: &mut BnState<'_, T>,
    layer_idx: usize,
    attn_block: bool,
) -> Result<Var> {
    let eps = lit::<T>(BATCHNORM_EPS);
    match bn {
        BnState::Train(layers) => {
            let params = if attn_block {
                &mut layers[layer_idx].bn_attn
            } else {
                &mut layers[layer_idx].bn_ffn
            };
            g.batchnorm_train(
                x,
                gamma,
                beta,
                &mut params.running_mean,
                &mut params.running_var,
                lit::<T>(BATCHNORM_MOMENTUM),
                eps,
            )
        }
        BnState::Eval(layers) => {
            let params = if attn_block {
                &layers[layer_idx].bn_attn
            } else {
                &layers[layer_idx].bn_ffn
            };
            g.batchnorm_eval(
                x,
                gamma,
                beta,
                &params.running_mean,
                &params.running_var,
                eps,
            )
        }
    }
}

/// One full encoder layer: attention + residual + batchnorm, then the
/// position-wise FFN (linear, GELU, dropout, linear) + residual + batchnorm.
/// Raises a numeric error if the output picks up NaN or infinities.
fn encoder_layer<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    layer: &LayerVars,
    x: Var,
    training: bool,
    bn: &mut BnState<'_, T>,
    layer_idx: usize,
) -> Result<Var> {
    let (attn_out, _probs) = self_attention(g, cfg, layer, x)?;
    let residual = g.add(x, attn_out)?;
    let normed = batchnorm_step(
        g,
        residual,
        layer.bn_attn_gamma,
        layer.bn_attn_beta,
        bn,
        layer_idx,
        true,
    )?;

    let ff = g.matmul(normed, layer.ffn_w1)?;
    let ff = g.gelu(ff)?;
    let ff = g.dropout(ff, cfg.dropout_p, training)?;
    let ff = g.matmul(ff, layer.ffn_w2)?;
    let residual = g.add(normed, ff)?;
    let out = batchnorm_step(
        g,
        residual,
        layer.bn_ffn_gamma,
        layer.bn_ffn_beta,
        bn,
        layer_idx,
        false,
    )?;
    g.ensure_finite(out, &format!("encoder layer {layer_idx} output"))?;
    Ok(out)
}

/// Per-modality reconstruction head: each `(B, 1, P, d_model)` slice is
/// projected back to patch space by its own matrix, then the modality axis is
/// reassembled.
pub fn patch_head<T: Scalar>(g: &Graph<T>, heads: &[Var], z: Var) -> Result<Var> {
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 4 || shape[1] != heads.len() {
        return Err(Error::Shape(format!(
            "patch head expects (B, {}, P, d_model), got {shape:?}",
            heads.len()
        )));
    }
    let mut parts = Vec::with_capacity(heads.len());
    for (m, &head) in heads.iter().enumerate() {
        let slice = g.narrow(z, 1, m, 1)?;
        parts.push(g.matmul(slice, head)?);
    }
    g.concat(&parts, 1)
}

fn forward_impl<T: Scalar>(
    cfg: &ModelConfig,
    g: &Graph<T>,
    vars: &ModelVars,
    windows: &Tensor<T>,
    training: bool,
    mut bn: BnState<'_, T>,
) -> Result<(Var, Var)> {
    if windows.rank() != 3 || windows.shape()[1] != cfg.n_modalities {
        return Err(Error::Shape(format!(
            "forward expects (B, {}, {}) windows, got {:?}",
            cfg.n_modalities,
            cfg.patch.window_len(),
            windows.shape()
        )));
    }
    let batch = windows.shape()[0];
    let p_num = cfg.num_patches()?;
    let p_len = cfg.patch.patch_len;
    let m = cfg.n_modalities;

    let x_p = g.constant(patch::patchify_batch(windows, &cfg.patch)?);
    let folded = g.reshape(x_p, vec![batch * m, p_num, p_len])?;
    let mut hidden = embed(g, folded, vars.w_proj, vars.w_pe)?;
    for (layer_idx, layer) in vars.layers.iter().enumerate() {
        hidden = encoder_layer(g, cfg, layer, hidden, training, &mut bn, layer_idx)?;
    }
    let z = g.reshape(hidden, vec![batch, m, p_num, cfg.d_model])?;
    let recon = patch_head(g, &vars.patch_heads, z)?;
    Ok((x_p, recon))
}

/// Analytic floating-point operation count of one eval-mode forward pass for
/// a batch, counting a multiply-add as two flops. Monotone in the number of
/// patches, hence in the window size.
pub fn forward_flops(cfg: &ModelConfig, batch: usize) -> Result<u64> {
    let p = cfg.num_patches()? as u64;
    let n = (batch * cfg.n_modalities) as u64;
    let d = cfg.d_model as u64;
    let l = cfg.patch.patch_len as u64;
    let hk = (cfg.n_heads * cfg.d_k) as u64;
    let hv = (cfg.n_heads * cfg.d_v) as u64;
    let ffn = cfg.ffn_mult as u64 * d;

    let embed = 2 * n * p * l * d + n * p * d;
    let per_layer = 2 * n * p * d * hk * 2      // Q and K projections
        + 2 * n * p * d * hv                    // V projection
        + 2 * n * p * p * (hk + hv)             // scores and context
        + 4 * n * p * p * cfg.n_heads as u64    // softmax
        + 2 * n * p * hv * d                    // output projection
        + 2 * 2 * n * p * d * ffn               // FFN matmuls
        + 8 * n * p * ffn                       // GELU
        + 2 * 10 * n * p * d; // residuals + batchnorm passes
    let head = 2 * n * p * d * l;
    Ok(embed + cfg.n_layers as u64 * per_layer + head)
}
