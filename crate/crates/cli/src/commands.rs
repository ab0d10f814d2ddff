//! The five operator commands: train, score, eval, ablate, bench.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use patchtrad::checkpoint::{load_checkpoint, save_checkpoint};
use patchtrad::data::{load_labeled_csv, load_series_csv, TimeSeries};
use patchtrad::detect::{score_stream, score_windows, ScoreOptions, ScoreSeries};
use patchtrad::metrics::{macro_average, EvalReport};
use patchtrad::model::{forward_flops, init_model, ModelState};
use patchtrad::patch::PatchConfig;
use patchtrad::synth;
use patchtrad::train::{train, EpochLoss};
use patchtrad::{Error, Normalizer, Result};

use crate::config::{ResolvedEntry, RunConfig};

/// The 14 (patch_len, stride) cells swept by default.
pub const DEFAULT_ABLATION_GRID: [(usize, usize); 14] = [
    (3, 3),
    (5, 3),
    (5, 5),
    (6, 6),
    (8, 3),
    (8, 5),
    (8, 6),
    (8, 8),
    (16, 12),
    (16, 16),
    (28, 22),
    (28, 28),
    (32, 28),
    (32, 32),
];

fn entry_dir(out: &Path, entry: &ResolvedEntry) -> PathBuf {
    out.join(&entry.name)
}

fn checkpoint_path(out: &Path, entry: &ResolvedEntry) -> PathBuf {
    entry_dir(out, entry).join("checkpoint.ptad")
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Whether a CSV header mentions a column, without parsing the body.
fn csv_has_column(path: &Path, column: &str) -> Result<bool> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut header = String::new();
    std::io::BufReader::new(file)
        .read_line(&mut header)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(header
        .trim_end()
        .split(',')
        .any(|field| field.trim() == column))
}

/// Loads a training series, dropping a configured label column if the file
/// carries one (training splits are all-normal; labels there are noise).
fn load_train_series(entry: &ResolvedEntry) -> Result<TimeSeries> {
    if let Some(label) = &entry.label_column {
        if csv_has_column(&entry.train_csv, label)? {
            return Ok(load_labeled_csv(&entry.train_csv, label)?.series);
        }
    }
    load_series_csv(&entry.train_csv)
}

fn write_loss_csv(path: &Path, log: &[EpochLoss]) -> Result<()> {
    let mut body = String::from("epoch,mean_loss\n");
    for row in log {
        body.push_str(&format!("{},{}\n", row.epoch, row.mean_loss));
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let entries = cfg.resolve_entries()?;
    let train_cfg = cfg.train_config();
    for entry in &entries {
        let raw = load_train_series(entry)?;
        let model_cfg = cfg.model_config(raw.n_modalities())?;
        let normalizer = Normalizer::fit(&raw);
        let normalized = normalizer.apply(&raw)?;
        let (mut state, log) = train(&normalized, &model_cfg, &train_cfg)?;
        state.normalizer = Some(normalizer);

        let dir = entry_dir(out, entry);
        ensure_dir(&dir)?;
        save_checkpoint(&state, Some(&train_cfg), &checkpoint_path(out, entry))?;
        write_loss_csv(&dir.join("loss.csv"), &log)?;
        println!(
            "trained {}: {} epochs over {} observations, mean loss {:.6} -> {:.6}",
            entry.name,
            train_cfg.epochs,
            raw.len(),
            log.first().map(|l| l.mean_loss).unwrap_or(f64::NAN),
            log.last().map(|l| l.mean_loss).unwrap_or(f64::NAN),
        );
    }
    Ok(())
}

struct LoadedTest {
    series: TimeSeries,
    labels: Option<Vec<u8>>,
}

fn load_test_split(entry: &ResolvedEntry) -> Result<LoadedTest> {
    let test_csv = entry.test_csv.as_ref().ok_or_else(|| {
        Error::Config(format!("entry '{}' has no test_csv configured", entry.name))
    })?;
    if let Some(label) = &entry.label_column {
        if csv_has_column(test_csv, label)? {
            let labeled = load_labeled_csv(test_csv, label)?;
            return Ok(LoadedTest {
                series: labeled.series,
                labels: Some(labeled.labels),
            });
        }
    }
    Ok(LoadedTest {
        series: load_series_csv(test_csv)?,
        labels: None,
    })
}

/// Loads a checkpoint and prepares the normalized scoring inputs shared by
/// the score and eval commands.
fn scores_for_entry(
    cfg: &RunConfig,
    entry: &ResolvedEntry,
    checkpoint: &Path,
) -> Result<ScoreSeries> {
    let (state, _) = load_checkpoint(checkpoint)?;
    let test = load_test_split(entry)?;
    if test.series.n_modalities() != state.cfg.n_modalities {
        return Err(Error::Data(format!(
            "test data for '{}' has {} modalities but checkpoint {} expects {}",
            entry.name,
            test.series.n_modalities(),
            checkpoint.display(),
            state.cfg.n_modalities
        )));
    }
    let normalizer = state.normalizer.clone().ok_or_else(|| {
        Error::Format(format!(
            "checkpoint {} carries no normalizer statistics",
            checkpoint.display()
        ))
    })?;
    let train_raw = load_train_series(entry)?;
    if train_raw.len() < state.cfg.patch.window_w {
        return Err(Error::Data(format!(
            "training series for '{}' is shorter than the window",
            entry.name
        )));
    }
    let train_z = normalizer.apply(&train_raw)?;
    let test_z = normalizer.apply(&test.series)?;
    let context = train_z.tail(state.cfg.patch.window_w)?;
    let opts = ScoreOptions {
        batch_size: cfg.output.score_batch_size,
    };
    let scores = score_stream(&state, &context, &test_z, opts)?;
    match test.labels {
        Some(labels) => scores.with_labels(labels),
        None => Ok(scores),
    }
}

fn resolve_checkpoint(
    out: &Path,
    entry: &ResolvedEntry,
    override_path: Option<&Path>,
    n_entries: usize,
) -> Result<PathBuf> {
    match override_path {
        Some(path) if n_entries == 1 => Ok(path.to_path_buf()),
        Some(_) => Err(Error::Config(
            "--checkpoint cannot be combined with a multi-entry manifest".into(),
        )),
        None => {
            let path = checkpoint_path(out, entry);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "no checkpoint at {}; run the train command first or pass --checkpoint",
                    path.display()
                )));
            }
            Ok(path)
        }
    }
}

pub fn cmd_score(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let entries = cfg.resolve_entries()?;
    for entry in &entries {
        let ck = resolve_checkpoint(out, entry, checkpoint, entries.len())?;
        let scores = scores_for_entry(cfg, entry, &ck)?;
        let dir = entry_dir(out, entry);
        ensure_dir(&dir)?;
        let path = dir.join("scores.csv");
        scores.write_csv(&path)?;
        println!(
            "scored {}: {} rows -> {}",
            entry.name,
            scores.len(),
            path.display()
        );
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    scores_csv: Option<&Path>,
) -> Result<()> {
    let report = if let Some(path) = scores_csv {
        let scores = ScoreSeries::read_csv(path)?;
        EvalReport::from_scores(&cfg.dataset_name(), &scores)?
    } else {
        let entries = cfg.resolve_entries()?;
        let mut reports = Vec::with_capacity(entries.len());
        for entry in &entries {
            let ck = resolve_checkpoint(out, entry, checkpoint, entries.len())?;
            let scores = scores_for_entry(cfg, entry, &ck)?;
            reports.push(EvalReport::from_scores(&entry.name, &scores)?);
        }
        if reports.len() == 1 {
            reports.pop().expect("one report")
        } else {
            macro_average(&cfg.dataset_name(), reports)?
        }
    };
    ensure_dir(out)?;
    std::fs::write(out.join("report.txt"), report.render_text())?;
    report.write_csv(&out.join("report.csv"))?;
    print!("{}", report.render_text());
    Ok(())
}

/// Parses a `3x3,8x6` style grid argument.
pub fn parse_grid(spec: &str) -> Result<Vec<(usize, usize)>> {
    let mut cells = Vec::new();
    for token in spec.split(',') {
        let token = token.trim();
        let (p, s) = token.split_once('x').ok_or_else(|| {
            Error::Config(format!(
                "grid cell '{token}' must look like PATCHxSTRIDE, e.g. 8x6"
            ))
        })?;
        let parse = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("grid cell '{token}' has a non-numeric part")))
        };
        cells.push((parse(p)?, parse(s)?));
    }
    if cells.is_empty() {
        return Err(Error::Config("the ablation grid is empty".into()));
    }
    Ok(cells)
}

/// Trains and evaluates one model per grid cell, each from a fresh
/// seed-derived init; invalid cells become warning rows instead of aborting.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, grid: &[(usize, usize)]) -> Result<()> {
    let entries = cfg.resolve_entries()?;
    for entry in &entries {
        if entry.test_csv.is_none() || entry.label_column.is_none() {
            return Err(Error::Config(format!(
                "entry '{}' needs test_csv and label_column for ablation",
                entry.name
            )));
        }
    }
    let base_train_cfg = cfg.train_config();
    let window = cfg.dataset.window;
    let mut rows = vec!["p_len,stride,auc".to_string()];

    for &(p_len, stride) in grid {
        let patch = PatchConfig {
            window_w: window,
            patch_len: p_len,
            stride,
        };
        if let Err(err) = patch.validate() {
            eprintln!("warning: skipping cell {p_len}x{stride}: {err}");
            rows.push(format!("{p_len},{stride},"));
            continue;
        }
        // Mix the geometry into the seed so every cell trains from its own
        // fresh init regardless of grid order.
        let mut train_cfg = base_train_cfg.clone();
        train_cfg.seed = base_train_cfg
            .seed
            .wrapping_add(p_len as u64)
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stride as u64);

        let mut reports = Vec::with_capacity(entries.len());
        for entry in &entries {
            let raw = load_train_series(entry)?;
            let model_cfg = cfg.model_config_for_patch(patch, raw.n_modalities())?;
            let normalizer = Normalizer::fit(&raw);
            let normalized = normalizer.apply(&raw)?;
            let (mut state, _) = train(&normalized, &model_cfg, &train_cfg)?;
            state.normalizer = Some(normalizer);

            let test = load_test_split(entry)?;
            let labels = test.labels.ok_or_else(|| {
                Error::Data(format!("test split for '{}' has no labels", entry.name))
            })?;
            let test_z = state
                .normalizer
                .as_ref()
                .expect("set above")
                .apply(&test.series)?;
            let context = normalized.tail(window)?;
            let opts = ScoreOptions {
                batch_size: cfg.output.score_batch_size,
            };
            let scores = score_stream(&state, &context, &test_z, opts)?.with_labels(labels)?;
            reports.push(EvalReport::from_scores(&entry.name, &scores)?);
        }
        let auc = if reports.len() == 1 {
            reports[0].auc
        } else {
            macro_average(&cfg.dataset_name(), reports)?.auc
        };
        println!("ablation cell patch_len={p_len} stride={stride}: auc {auc:.4}");
        rows.push(format!("{p_len},{stride},{auc}"));
    }

    ensure_dir(out)?;
    let path = out.join("ablation.csv");
    std::fs::write(&path, rows.join("\n") + "\n")?;
    println!("ablation table -> {}", path.display());
    Ok(())
}

pub struct BenchArgs {
    pub windows: Vec<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub modalities: Option<usize>,
}

impl Default for BenchArgs {
    fn default() -> Self {
        Self {
            windows: vec![32, 64, 128, 256],
            batch_size: 128,
            iterations: 30,
            warmup: 5,
            modalities: None,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Measures wall-clock batched inference per window size (median and p90 of
/// warm iterations) and writes `window,median_ms,p90_ms` rows.
pub fn cmd_bench(cfg: &RunConfig, out: &Path, args: &BenchArgs) -> Result<()> {
    if args.iterations < 30 {
        return Err(Error::Config(format!(
            "bench needs at least 30 timed iterations, got {}",
            args.iterations
        )));
    }
    if args.warmup < 5 {
        return Err(Error::Config(format!(
            "bench needs at least 5 warmup iterations, got {}",
            args.warmup
        )));
    }
    if args.windows.is_empty() {
        return Err(Error::Config("bench needs at least one window size".into()));
    }
    let modalities = match args.modalities {
        Some(m) if m >= 1 => m,
        Some(m) => return Err(Error::Config(format!("--modalities must be >= 1, got {m}"))),
        None => {
            let entries = cfg.resolve_entries()?;
            load_train_series(&entries[0])?.n_modalities()
        }
    };
    // Validate every window size against the patch geometry up front.
    let mut flops = Vec::with_capacity(args.windows.len());
    for &w in &args.windows {
        let patch = PatchConfig {
            window_w: w,
            patch_len: cfg.patch.patch_len,
            stride: cfg.patch.stride,
        };
        patch.validate().map_err(|e| {
            Error::Config(format!(
                "window {w} is invalid for the configured patch: {e}"
            ))
        })?;
        let model_cfg = cfg.model_config_for_patch(patch, modalities)?;
        flops.push(forward_flops(&model_cfg, args.batch_size)?);
    }

    let mut rows = vec!["window,median_ms,p90_ms".to_string()];
    for (&w, &flop_count) in args.windows.iter().zip(&flops) {
        let patch = PatchConfig {
            window_w: w,
            patch_len: cfg.patch.patch_len,
            stride: cfg.patch.stride,
        };
        let model_cfg = cfg.model_config_for_patch(patch, modalities)?;
        let state: ModelState<f32> = init_model(&model_cfg, cfg.train_config().seed)?;
        let stimulus =
            synth::multi_sine(modalities, w + 1 + args.batch_size, cfg.train_config().seed);
        let starts: Vec<usize> = (0..args.batch_size).collect();
        let windows = stimulus.window_batch(&starts, w + 1)?;

        for _ in 0..args.warmup {
            score_windows(&state, &windows)?;
        }
        let mut samples = Vec::with_capacity(args.iterations);
        for _ in 0..args.iterations {
            let start = Instant::now();
            let scores = score_windows(&state, &windows)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(scores);
            samples.push(elapsed);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let median = percentile(&samples, 0.5);
        let p90 = percentile(&samples, 0.9);
        println!(
            "bench window {w}: median {median:.3} ms, p90 {p90:.3} ms per batch of {} ({} flops)",
            args.batch_size, flop_count
        );
        rows.push(format!("{w},{median},{p90}"));
    }

    ensure_dir(out)?;
    let path = out.join("bench.csv");
    std::fs::write(&path, rows.join("\n") + "\n")?;
    println!("bench table -> {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_the_fourteen_cells() {
        assert_eq!(DEFAULT_ABLATION_GRID.len(), 14);
        assert_eq!(DEFAULT_ABLATION_GRID[0], (3, 3));
        assert_eq!(DEFAULT_ABLATION_GRID[13], (32, 32));
        // Every default cell keeps stride within the patch length.
        assert!(DEFAULT_ABLATION_GRID.iter().all(|&(p, s)| s <= p));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("3x3, 8x6").unwrap(), vec![(3, 3), (8, 6)]);
        assert!(parse_grid("3-3").is_err());
        assert!(parse_grid("axb").is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&sorted, 0.5), 2.5);
        assert_eq!(percentile(&sorted, 1.0), 4.0);
        assert_eq!(percentile(&sorted, 0.0), 1.0);
    }
}
