//! Shared fixtures for the criterion benchmarks.

use patchtrad::model::{init_model, AttentionScale, ModelConfig, ModelState};
use patchtrad::patch::PatchConfig;
use patchtrad::synth::multi_sine;
use patchtrad::Tensor;

/// A detector with the default-sized encoder over the given window.
pub fn bench_model(window_w: usize, n_modalities: usize) -> ModelState<f32> {
    let cfg = ModelConfig {
        d_model: 64,
        n_heads: 4,
        d_k: 16,
        d_v: 16,
        n_layers: 3,
        ffn_mult: 2,
        dropout_p: 0.1,
        attention_scale: AttentionScale::DModel,
        patch: PatchConfig::new(window_w, 8, 6).expect("valid bench geometry"),
        n_modalities,
    };
    init_model(&cfg, 7).expect("valid bench config")
}

/// A `(batch, M, w + 1)` stimulus of overlapping windows from a synthetic
/// stream.
pub fn bench_windows(window_w: usize, n_modalities: usize, batch: usize) -> Tensor<f32> {
    let stream = multi_sine(n_modalities, window_w + 1 + batch, 99);
    let starts: Vec<usize> = (0..batch).collect();
    stream
        .window_batch(&starts, window_w + 1)
        .expect("stream long enough for the batch")
}
