//! End-to-end training behavior at desk scale: loss identities shared with
//! the detector, spike detection on a synthetic stream, and the checkpoint
//! bridge.

use patchtrad::checkpoint::{load_checkpoint, save_checkpoint};
use patchtrad::detect::{score_stream, ScoreOptions};
use patchtrad::metrics::roc_auc_from;
use patchtrad::model::{AttentionScale, ModelConfig};
use patchtrad::patch::PatchConfig;
use patchtrad::synth::{inject_spikes, multi_sine};
use patchtrad::train::{train, TrainConfig};
use patchtrad::Normalizer;

fn small_model(w: usize, m: usize) -> ModelConfig {
    ModelConfig {
        d_model: 24,
        n_heads: 2,
        d_k: 12,
        d_v: 12,
        n_layers: 1,
        ffn_mult: 2,
        dropout_p: 0.05,
        attention_scale: AttentionScale::DModel,
        patch: PatchConfig::new(w, 8, 6).unwrap(),
        n_modalities: m,
    }
}

#[test]
fn spikes_in_a_multivariate_stream_are_ranked_first() {
    let full = multi_sine(2, 1600, 40);
    let train_split = full.slice(0, 1200).unwrap();
    let test_clean = full.slice(1200, 1600).unwrap();

    let norm = Normalizer::fit(&train_split);
    let train_z = norm.apply(&train_split).unwrap();

    let model_cfg = small_model(32, 2);
    let train_cfg = TrainConfig {
        epochs: 4,
        batch_size: 64,
        seed: 9,
        window_stride: 2,
        ..TrainConfig::default()
    };
    let (mut state, log) = train(&train_z, &model_cfg, &train_cfg).unwrap();
    state.normalizer = Some(norm.clone());
    assert!(log.last().unwrap().mean_loss < log.first().unwrap().mean_loss);

    let (test_spiked, labels) = inject_spikes(&test_clean, 8, 8.0, 77).unwrap();
    let test_z = norm.apply(&test_spiked).unwrap();
    let context = train_z.tail(32).unwrap();
    let scores = score_stream(&state, &context, &test_z, ScoreOptions::default()).unwrap();

    let auc = roc_auc_from(scores.scores(), &labels).unwrap();
    assert!(auc > 0.9, "spike detection AUC {auc}");
}

#[test]
fn trained_checkpoint_round_trips_and_scores_identically() {
    let series = multi_sine(1, 400, 4);
    let norm = Normalizer::fit(&series);
    let series_z = norm.apply(&series).unwrap();
    let model_cfg = small_model(16, 1);
    let train_cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        seed: 15,
        ..TrainConfig::default()
    };
    let (mut state, _) = train(&series_z, &model_cfg, &train_cfg).unwrap();
    state.normalizer = Some(norm);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trained.ptad");
    save_checkpoint(&state, Some(&train_cfg), &path).unwrap();
    let (loaded, train_back) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(train_back.as_ref(), Some(&train_cfg));

    let context = series_z.tail(16).unwrap();
    let test = series_z.slice(100, 160).unwrap();
    let a = score_stream(&state, &context, &test, ScoreOptions::default()).unwrap();
    let b = score_stream(&loaded, &context, &test, ScoreOptions::default()).unwrap();
    assert_eq!(a, b);
}
