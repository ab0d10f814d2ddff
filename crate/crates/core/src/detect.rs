//! Anomaly scoring: the reconstruction error of the final patch, which by the
//! padding construction always contains the observation under test.

use std::path::Path;

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::graph::Graph;
use crate::tensor::{Scalar, Tensor};

/// Per-time-index anomaly scores over a test stream, optionally aligned with
/// ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    indices: Vec<usize>,
    scores: Vec<f64>,
    labels: Option<Vec<u8>>,
}

impl ScoreSeries {
    pub fn new(indices: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if indices.len() != scores.len() {
            return Err(Error::Data(format!(
                "{} indices do not match {} scores",
                indices.len(),
                scores.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(
                "score indices must be strictly increasing".into(),
            ));
        }
        if let Some(pos) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Data(format!(
                "score at index {} is {}, expected a finite non-negative value",
                indices[pos], scores[pos]
            )));
        }
        Ok(Self {
            indices,
            scores,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.scores.len() {
            return Err(Error::Data(format!(
                "{} labels do not align with {} scores",
                labels.len(),
                self.scores.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Writes `index,score[,label]` rows, one per scored observation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        let labeled = self.labels.is_some();
        let header: &[&str] = if labeled {
            &["index", "score", "label"]
        } else {
            &["index", "score"]
        };
        writer
            .write_record(header)
            .map_err(|e| Error::Data(e.to_string()))?;
        for i in 0..self.len() {
            let mut record = vec![self.indices[i].to_string(), self.scores[i].to_string()];
            if let Some(labels) = &self.labels {
                record.push(labels[i].to_string());
            }
            writer
                .write_record(&record)
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Reads a score CSV produced by [`ScoreSeries::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
            .clone();
        let has_labels = headers.iter().any(|h| h == "label");
        if !(headers.iter().any(|h| h == "index") && headers.iter().any(|h| h == "score")) {
            return Err(Error::Data(format!(
                "{}: expected an index,score[,label] header, got {headers:?}",
                path.display()
            )));
        }
        let mut indices = Vec::new();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record
                .map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), row + 1)))?;
            let field = |name: &str| -> Result<&str> {
                headers
                    .iter()
                    .position(|h| h == name)
                    .and_then(|i| record.get(i))
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "{}: row {} lacks '{name}'",
                            path.display(),
                            row + 1
                        ))
                    })
            };
            indices.push(field("index")?.parse::<usize>().map_err(|e| {
                Error::Data(format!(
                    "{}: row {}: bad index: {e}",
                    path.display(),
                    row + 1
                ))
            })?);
            scores.push(field("score")?.parse::<f64>().map_err(|e| {
                Error::Data(format!(
                    "{}: row {}: bad score: {e}",
                    path.display(),
                    row + 1
                ))
            })?);
            if has_labels {
                labels.push(field("label")?.parse::<u8>().map_err(|e| {
                    Error::Data(format!(
                        "{}: row {}: bad label: {e}",
                        path.display(),
                        row + 1
                    ))
                })?);
            }
        }
        let series = Self::new(indices, scores)?;
        if has_labels {
            series.with_labels(labels)
        } else {
            Ok(series)
        }
    }
}

/// Reconstruction error per patch of a single `(M, p_num, patch_len)` window,
/// summed over modalities and patch positions. The training loss is the sum
/// of these terms; the anomaly score is the last one.
pub fn per_patch_errors<T: Scalar>(x_p: &Tensor<T>, recon: &Tensor<T>) -> Result<Vec<f64>> {
    if x_p.shape() != recon.shape() || x_p.rank() != 3 {
        return Err(Error::Shape(format!(
            "expected matching (M, p_num, patch_len) tensors, got {:?} vs {:?}",
            x_p.shape(),
            recon.shape()
        )));
    }
    let (m, p_num, p_len) = (x_p.shape()[0], x_p.shape()[1], x_p.shape()[2]);
    let mut errors = vec![0f64; p_num];
    for modality in 0..m {
        for (patch, slot) in errors.iter_mut().enumerate() {
            let base = (modality * p_num + patch) * p_len;
            let mut acc = 0f64;
            for j in 0..p_len {
                let d = (x_p.data()[base + j] - recon.data()[base + j])
                    .to_f64()
                    .expect("finite");
                acc += d * d;
            }
            *slot += acc;
        }
    }
    Ok(errors)
}

/// Scores one `(M, w + 1)` window: the squared reconstruction error of the
/// final patch under the frozen model.
pub fn anomaly_score(state: &ModelState<f32>, window: &Tensor<f32>) -> Result<f64> {
    if window.rank() != 2 {
        return Err(Error::Shape(format!(
            "anomaly_score expects an (M, w + 1) window, got {:?}",
            window.shape()
        )));
    }
    let batched = window
        .clone()
        .reshaped(vec![1, window.shape()[0], window.shape()[1]])?;
    let scores = score_windows(state, &batched)?;
    Ok(scores[0])
}

/// Last-patch reconstruction errors for a `(B, M, w + 1)` batch of windows.
pub fn score_windows(state: &ModelState<f32>, windows: &Tensor<f32>) -> Result<Vec<f64>> {
    let g = Graph::new(0);
    let vars = state.bind(&g, false);
    let (x_p, recon) = state.forward_eval(&g, &vars, windows)?;
    let x_p = g.value(x_p);
    let recon = g.value(recon);
    recon.ensure_finite("window reconstruction")?;
    let (batch, m, p_num, p_len) = (
        x_p.shape()[0],
        x_p.shape()[1],
        x_p.shape()[2],
        x_p.shape()[3],
    );
    let mut scores = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut acc = 0f64;
        for modality in 0..m {
            let base = (((b * m) + modality) * p_num + (p_num - 1)) * p_len;
            for j in 0..p_len {
                let d = (x_p.data()[base + j] - recon.data()[base + j]) as f64;
                acc += d * d;
            }
        }
        scores.push(acc);
    }
    Ok(scores)
}

/// Batching knob for stream scoring.
#[derive(Clone, Copy, Debug)]
pub struct ScoreOptions {
    pub batch_size: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { batch_size: 128 }
    }
}

/// Scores every observation of a test stream with a sliding window. The
/// context must hold exactly the `w` observations preceding the test split
/// (the tail of the training series), so the first test points are scored
/// too and every label stays aligned. Both inputs must already be normalized
/// with the training statistics.
pub fn score_stream(
    state: &ModelState<f32>,
    context: &TimeSeries,
    test: &TimeSeries,
    opts: ScoreOptions,
) -> Result<ScoreSeries> {
    let w = state.cfg.patch.window_w;
    if context.len() != w {
        return Err(Error::Data(format!(
            "context must hold exactly w = {w} observations, got {}",
            context.len()
        )));
    }
    for (name, series) in [("context", context), ("test", test)] {
        if series.n_modalities() != state.cfg.n_modalities {
            return Err(Error::Data(format!(
                "{name} series has {} modalities but the model expects {}",
                series.n_modalities(),
                state.cfg.n_modalities
            )));
        }
    }
    if test.is_empty() {
        return Err(Error::Data("test series is empty".into()));
    }
    let combined = context.extend_with(test)?;
    let window_len = state.cfg.patch.window_len();
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut scores = Vec::with_capacity(test.len());
    for chunk in indices.chunks(opts.batch_size.max(1)) {
        let windows = combined.window_batch(chunk, window_len)?;
        scores.extend(score_windows(state, &windows)?);
    }
    ScoreSeries::new(indices, scores)
}

/// Linear-interpolation quantile of reference scores, for turning scores into
/// a binary alert threshold downstream.
pub fn threshold_from_quantile(scores: &ScoreSeries, q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("cannot take a quantile of no scores".into()));
    }
    if !(0.0 < q && q < 1.0) {
        return Err(Error::Config(format!(
            "quantile must be in (0, 1), got {q}"
        )));
    }
    let mut sorted = scores.scores().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, AttentionScale, ModelConfig};
    use crate::patch::{self, PatchConfig};
    use crate::train::{train, TrainConfig};

    fn tiny_cfg(m: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_k: 8,
            d_v: 8,
            n_layers: 1,
            ffn_mult: 2,
            dropout_p: 0.0,
            attention_scale: AttentionScale::DModel,
            patch: PatchConfig::new(12, 4, 3).unwrap(),
            n_modalities: m,
        }
    }

    fn series_from_fn(len: usize, f: impl Fn(usize) -> f32) -> TimeSeries {
        TimeSeries::new((0..len).map(f).collect(), vec!["v".into()]).unwrap()
    }

    #[test]
    fn scores_are_nonnegative_and_deterministic() {
        let cfg = tiny_cfg(1);
        let state = init_model::<f32>(&cfg, 3).unwrap();
        let window = Tensor::from_vec(
            vec![1, cfg.patch.window_len()],
            (0..cfg.patch.window_len())
                .map(|i| (i as f32 * 0.3).sin())
                .collect(),
        )
        .unwrap();
        let a = anomaly_score(&state, &window).unwrap();
        let b = anomaly_score(&state, &window).unwrap();
        assert!(a >= 0.0);
        assert_eq!(a, b);
    }

    #[test]
    fn anomaly_score_equals_last_per_patch_term() {
        let cfg = tiny_cfg(2);
        let state = init_model::<f32>(&cfg, 5).unwrap();
        let wlen = cfg.patch.window_len();
        let data: Vec<f32> = (0..2 * wlen).map(|i| (i as f32 * 0.21).cos()).collect();
        let window = Tensor::from_vec(vec![2, wlen], data).unwrap();

        let score = anomaly_score(&state, &window).unwrap();

        let g = Graph::new(0);
        let vars = state.bind(&g, false);
        let batched = window.clone().reshaped(vec![1, 2, wlen]).unwrap();
        let (x_p, recon) = state.forward_eval(&g, &vars, &batched).unwrap();
        let p_num = cfg.num_patches().unwrap();
        let x_p = g
            .tensor(x_p)
            .reshaped(vec![2, p_num, cfg.patch.patch_len])
            .unwrap();
        let recon = g
            .tensor(recon)
            .reshaped(vec![2, p_num, cfg.patch.patch_len])
            .unwrap();
        let per_patch = per_patch_errors(&x_p, &recon).unwrap();
        let total: f64 = per_patch.iter().sum();
        let sse = crate::train::reconstruction_sse(&x_p, &recon).unwrap();
        assert!(
            (total - sse).abs() <= 1e-6 * sse.max(1.0),
            "{total} vs {sse}"
        );
        let last = per_patch[p_num - 1];
        assert!(
            (score - last).abs() <= 1e-6 * last.max(1e-12),
            "{score} vs {last}"
        );
    }

    #[test]
    fn converged_model_scores_near_zero() {
        // A constant signal is exactly reconstructable; train to convergence
        // and the last-patch error must vanish.
        let series = series_from_fn(200, |_| 1.5);
        let model_cfg = tiny_cfg(1);
        let train_cfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 13,
            ..TrainConfig::default()
        };
        let (state, log) = train(&series, &model_cfg, &train_cfg).unwrap();
        assert!(log.last().unwrap().mean_loss < log.first().unwrap().mean_loss);
        let window = series
            .window_batch(&[100], model_cfg.patch.window_len())
            .unwrap()
            .reshaped(vec![1, model_cfg.patch.window_len()])
            .unwrap();
        let score = anomaly_score(&state, &window).unwrap();
        assert!(score < 1e-3, "trained reconstruction error {score}");
    }

    #[test]
    fn stream_scoring_covers_every_test_point() {
        let cfg = tiny_cfg(1);
        let state = init_model::<f32>(&cfg, 2).unwrap();
        let w = cfg.patch.window_w;
        let context = series_from_fn(w, |t| t as f32 * 0.1);
        let single = series_from_fn(1, |_| 0.7);
        let scores = score_stream(&state, &context, &single, ScoreOptions::default()).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores.indices(), &[0]);

        let test = series_from_fn(37, |t| (t as f32 * 0.4).sin());
        let scores = score_stream(&state, &context, &test, ScoreOptions { batch_size: 8 }).unwrap();
        assert_eq!(scores.len(), test.len());
    }

    #[test]
    fn stream_scores_are_translation_invariant() {
        let cfg = tiny_cfg(1);
        let state = init_model::<f32>(&cfg, 4).unwrap();
        let w = cfg.patch.window_w;
        let stream = series_from_fn(w + 30, |t| (t as f32 * 0.17).sin() + 0.2);
        let shift = 5usize;

        let context_a = stream.slice(0, w).unwrap();
        let test_a = stream.slice(w, stream.len()).unwrap();
        let scores_a = score_stream(&state, &context_a, &test_a, ScoreOptions::default()).unwrap();

        let context_b = stream.slice(shift, w + shift).unwrap();
        let test_b = stream.slice(w + shift, stream.len()).unwrap();
        let scores_b = score_stream(&state, &context_b, &test_b, ScoreOptions::default()).unwrap();

        for (i, score_b) in scores_b.scores().iter().enumerate() {
            let score_a = scores_a.scores()[i + shift];
            assert!(
                (score_a - score_b).abs() < 1e-9,
                "index {i}: {score_a} vs {score_b}"
            );
        }
    }

    #[test]
    fn scores_ignore_observations_beyond_the_window() {
        let cfg = tiny_cfg(1);
        let state = init_model::<f32>(&cfg, 4).unwrap();
        let w = cfg.patch.window_w;
        let test = series_from_fn(3, |t| 0.3 * t as f32);
        let context = series_from_fn(w, |t| (t as f32 * 0.11).cos());
        let mut far_past = series_from_fn(w, |t| (t as f32 * 0.11).cos());
        // Corrupt only the oldest context value; it leaves every test window
        // once the second test index is scored.
        far_past = {
            let mut values = far_past.values().to_vec();
            values[0] = 1e3;
            TimeSeries::new(values, vec!["v".into()]).unwrap()
        };
        let a = score_stream(&state, &context, &test, ScoreOptions::default()).unwrap();
        let b = score_stream(&state, &far_past, &test, ScoreOptions::default()).unwrap();
        assert_ne!(a.scores()[0], b.scores()[0]);
        for i in 1..test.len() {
            assert_eq!(a.scores()[i], b.scores()[i], "index {i} saw the far past");
        }
    }

    #[test]
    fn context_length_is_enforced() {
        let cfg = tiny_cfg(1);
        let state = init_model::<f32>(&cfg, 2).unwrap();
        let context = series_from_fn(cfg.patch.window_w - 1, |t| t as f32);
        let test = series_from_fn(4, |t| t as f32);
        assert!(score_stream(&state, &context, &test, ScoreOptions::default()).is_err());
    }

    #[test]
    fn spikes_rank_at_the_top() {
        let train_series = series_from_fn(600, |t| (t as f32 * 0.2).sin());
        let model_cfg = tiny_cfg(1);
        let train_cfg = TrainConfig {
            epochs: 10,
            batch_size: 32,
            seed: 21,
            window_stride: 2,
            ..TrainConfig::default()
        };
        let (state, _) = train(&train_series, &model_cfg, &train_cfg).unwrap();

        let w = model_cfg.patch.window_w;
        let context = train_series.tail(w).unwrap();
        let mut values: Vec<f32> = (600..800).map(|t| (t as f32 * 0.2).sin()).collect();
        let spikes = [40usize, 111, 170];
        for &s in &spikes {
            values[s] += 8.0;
        }
        let test = TimeSeries::new(values, vec!["v".into()]).unwrap();
        let scores = score_stream(&state, &context, &test, ScoreOptions::default()).unwrap();

        let mut ranked: Vec<usize> = (0..scores.len()).collect();
        ranked.sort_by(|&a, &b| scores.scores()[b].partial_cmp(&scores.scores()[a]).unwrap());
        let top: Vec<usize> = ranked[..spikes.len()].to_vec();
        for s in spikes {
            assert!(top.contains(&s), "spike at {s} not in top scores {top:?}");
        }
    }

    #[test]
    fn quantile_threshold() {
        let scores = ScoreSeries::new(vec![0, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(threshold_from_quantile(&scores, 0.5).unwrap(), 2.5);
        assert!((threshold_from_quantile(&scores, 0.999).unwrap() - 4.0).abs() < 0.01);
        assert!(threshold_from_quantile(&scores, 1.0).is_err());
        assert!(threshold_from_quantile(&scores, 0.0).is_err());
    }

    #[test]
    fn quantile_matches_population_on_uniform_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 4000usize;
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let series = ScoreSeries::new((0..n).collect(), scores).unwrap();
        let got = threshold_from_quantile(&series, 0.9).unwrap();
        // Var of the empirical 0.9-quantile of U(0,1): q(1-q)/(n f(q)^2).
        let sigma = (0.9f64 * 0.1 / n as f64).sqrt();
        assert!((got - 0.9).abs() < 3.0 * sigma, "quantile {got}");
    }

    #[test]
    fn score_series_validation_and_csv_round_trip() {
        assert!(ScoreSeries::new(vec![0, 0], vec![1.0, 2.0]).is_err());
        assert!(ScoreSeries::new(vec![0, 1], vec![1.0, -2.0]).is_err());
        assert!(ScoreSeries::new(vec![0, 1], vec![1.0, f64::NAN]).is_err());

        let scores = ScoreSeries::new(vec![0, 1, 5], vec![0.25, 1.5, 0.125])
            .unwrap()
            .with_labels(vec![0, 1, 0])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        scores.write_csv(&path).unwrap();
        let back = ScoreSeries::read_csv(&path).unwrap();
        assert_eq!(back, scores);
    }

    #[test]
    fn per_patch_sum_equals_total_on_random_tensors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let shape = vec![3usize, 5, 4];
        let n: usize = shape.iter().product();
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::from_vec(shape.clone(), a).unwrap();
        let y = Tensor::from_vec(shape, b).unwrap();
        let per_patch = per_patch_errors(&x, &y).unwrap();
        let total: f64 = per_patch.iter().sum();
        let sse = crate::train::reconstruction_sse(&x, &y).unwrap();
        assert!((total - sse).abs() < 1e-9 * sse.max(1.0));
    }

    #[test]
    fn patchify_bridge_to_stream_scores() {
        // score_stream's window construction equals hand-built windows.
        let cfg = tiny_cfg(1);
        let state = init_model::<f32>(&cfg, 9).unwrap();
        let w = cfg.patch.window_w;
        let stream = series_from_fn(w + 6, |t| (t as f32 * 0.31).sin());
        let context = stream.slice(0, w).unwrap();
        let test = stream.slice(w, stream.len()).unwrap();
        let scores = score_stream(&state, &context, &test, ScoreOptions::default()).unwrap();
        for i in 0..test.len() {
            let window = stream
                .window_batch(&[i], w + 1)
                .unwrap()
                .reshaped(vec![1, w + 1])
                .unwrap();
            let direct = anomaly_score(&state, &window).unwrap();
            assert!((scores.scores()[i] - direct).abs() < 1e-12);
        }
        // The patched last window really contains the final test value.
        let window = stream.window_batch(&[test.len() - 1], w + 1).unwrap();
        let patched = patch::patchify_batch(&window, &cfg.patch).unwrap();
        let p_len = cfg.patch.patch_len;
        let last_patch = &patched.data()[patched.len() - p_len..];
        let test_value = test.value(test.len() - 1, 0);
        assert!(last_patch.contains(&test_value));
    }
}
