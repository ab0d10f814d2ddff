//! CSV ingestion, train-statistics normalization, and dataset manifests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `M`-modality observation stream stored row-major as `(T, M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Vec<f32>,
    modality_names: Vec<String>,
    len: usize,
}

impl TimeSeries {
    pub fn new(values: Vec<f32>, modality_names: Vec<String>) -> Result<Self> {
        let m = modality_names.len();
        if m == 0 {
            return Err(Error::Data("a series needs at least one modality".into()));
        }
        if values.is_empty() || !values.len().is_multiple_of(m) {
            return Err(Error::Data(format!(
                "value buffer of length {} is not a non-empty multiple of {m} modalities",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, modality {}",
                pos / m + 1,
                modality_names[pos % m]
            )));
        }
        let len = values.len() / m;
        Ok(Self {
            values,
            modality_names,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn value(&self, t: usize, m: usize) -> f32 {
        self.values[t * self.n_modalities() + m]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// A contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len {
            return Err(Error::Data(format!(
                "slice {start}..{end} out of bounds for series of length {}",
                self.len
            )));
        }
        let m = self.n_modalities();
        Self::new(
            self.values[start * m..end * m].to_vec(),
            self.modality_names.clone(),
        )
    }

    /// The last `n` observations.
    pub fn tail(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len {
            return Err(Error::Data(format!(
                "cannot take a tail of {n} from a series of length {}",
                self.len
            )));
        }
        self.slice(self.len - n, self.len)
    }

    /// Concatenates two series over time; modality counts must agree.
    pub fn extend_with(&self, other: &TimeSeries) -> Result<Self> {
        if self.n_modalities() != other.n_modalities() {
            return Err(Error::Data(format!(
                "cannot join series with {} and {} modalities",
                self.n_modalities(),
                other.n_modalities()
            )));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::new(values, self.modality_names.clone())
    }

    /// Builds a `(B, M, window_len)` tensor of windows starting at `starts`.
    pub fn window_batch(&self, starts: &[usize], window_len: usize) -> Result<Tensor<f32>> {
        let m = self.n_modalities();
        let mut out = Vec::with_capacity(starts.len() * m * window_len);
        for &start in starts {
            if start + window_len > self.len {
                return Err(Error::Data(format!(
                    "window {start}..{} exceeds series length {}",
                    start + window_len,
                    self.len
                )));
            }
            for modality in 0..m {
                for t in start..start + window_len {
                    out.push(self.values[t * m + modality]);
                }
            }
        }
        Tensor::from_vec(vec![starts.len(), m, window_len], out)
    }
}

/// A test-split series carrying binary anomaly labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTimeSeries {
    pub series: TimeSeries,
    pub labels: Vec<u8>,
}

impl LabeledTimeSeries {
    pub fn new(series: TimeSeries, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != series.len() {
            return Err(Error::Data(format!(
                "{} labels do not cover {} observations",
                labels.len(),
                series.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {bad} is outside {{0, 1}}")));
        }
        Ok(Self { series, labels })
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Per-modality z-score parameters fitted on the training split. Modalities
/// with zero variance get std 1 (they normalize to zero) and are flagged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub zero_variance: Vec<bool>,
}

impl Normalizer {
    /// Fits per-modality mean and population standard deviation.
    pub fn fit(train: &TimeSeries) -> Self {
        let m = train.n_modalities();
        let t = train.len();
        let mut mean = vec![0f64; m];
        for row in train.values().chunks(m) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v as f64;
            }
        }
        for acc in mean.iter_mut() {
            *acc /= t as f64;
        }
        let mut var = vec![0f64; m];
        for row in train.values().chunks(m) {
            for ((acc, &mu), &v) in var.iter_mut().zip(&mean).zip(row) {
                let d = v as f64 - mu;
                *acc += d * d;
            }
        }
        let mut std = Vec::with_capacity(m);
        let mut zero_variance = Vec::with_capacity(m);
        for acc in var {
            let s = (acc / t as f64).sqrt();
            if s > 0.0 {
                std.push(s as f32);
                zero_variance.push(false);
            } else {
                std.push(1.0);
                zero_variance.push(true);
            }
        }
        Self {
            mean: mean.into_iter().map(|v| v as f32).collect(),
            std,
            zero_variance,
        }
    }

    pub fn apply(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.check_modalities(series)?;
        let m = self.mean.len();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % m]) / self.std[i % m])
            .collect();
        TimeSeries::new(values, series.modality_names().to_vec())
    }

    /// Inverse of [`Normalizer::apply`] (for round-trip checks and plotting).
    pub fn invert(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.check_modalities(series)?;
        let m = self.mean.len();
        let values = series
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i % m] + self.mean[i % m])
            .collect();
        TimeSeries::new(values, series.modality_names().to_vec())
    }

    fn check_modalities(&self, series: &TimeSeries) -> Result<()> {
        if series.n_modalities() != self.mean.len() {
            return Err(Error::Data(format!(
                "normalizer fitted on {} modalities cannot apply to {}",
                self.mean.len(),
                series.n_modalities()
            )));
        }
        Ok(())
    }
}

/// Loads an unlabeled series: every column is a float modality.
pub fn load_series_csv(path: &Path) -> Result<TimeSeries> {
    let (series, _) = load_csv(path, None)?;
    Ok(series)
}

/// Loads a labeled series; `label_column` must exist and hold only 0/1.
pub fn load_labeled_csv(path: &Path, label_column: &str) -> Result<LabeledTimeSeries> {
    let (series, labels) = load_csv(path, Some(label_column))?;
    let labels = labels.expect("label column requested");
    LabeledTimeSeries::new(series, labels)
}

fn load_csv(path: &Path, label_column: Option<&str>) -> Result<(TimeSeries, Option<Vec<u8>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!(
                "{}: label column '{name}' not found in header {:?}",
                path.display(),
                headers
            ))
        })?),
        None => None,
    };
    let modality_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if modality_names.is_empty() {
        return Err(Error::Data(format!(
            "{}: no value columns besides the label",
            path.display()
        )));
    }

    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), row + 1)))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                row + 1,
                record.len(),
                headers.len()
            )));
        }
        for (col, field) in record.iter().enumerate() {
            if Some(col) == label_idx {
                let label = match field {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => {
                        return Err(Error::Data(format!(
                            "{}: row {}, column '{}': label '{other}' is outside {{0, 1}}",
                            path.display(),
                            row + 1,
                            headers[col]
                        )))
                    }
                };
                labels.as_mut().expect("label column present").push(label);
            } else {
                let parsed: f32 = field.parse().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {}, column '{}': cannot parse '{field}' as a number",
                        path.display(),
                        row + 1,
                        headers[col]
                    ))
                })?;
                if !parsed.is_finite() {
                    return Err(Error::Data(format!(
                        "{}: row {}, column '{}': non-finite value '{field}'",
                        path.display(),
                        row + 1,
                        headers[col]
                    )));
                }
                values.push(parsed);
            }
        }
    }
    if values.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    Ok((TimeSeries::new(values, modality_names)?, labels))
}

/// Writes a series (optionally with labels) back out as CSV.
pub fn write_csv(
    series: &TimeSeries,
    labels: Option<&[u8]>,
    label_column: &str,
    path: &Path,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != series.len() {
            return Err(Error::Data(format!(
                "{} labels do not cover {} observations",
                l.len(),
                series.len()
            )));
        }
    }
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut header: Vec<String> = series.modality_names().to_vec();
    if labels.is_some() {
        header.push(label_column.to_string());
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::Data(e.to_string()))?;
    let m = series.n_modalities();
    for t in 0..series.len() {
        let mut record: Vec<String> = (0..m).map(|j| series.value(t, j).to_string()).collect();
        if let Some(l) = labels {
            record.push(l[t].to_string());
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// One train/test pair inside a manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub label_column: String,
}

/// A benchmark suite composed of one or more sub-datasets, each trained and
/// evaluated independently before macro-averaging.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

/// Parses and validates a manifest. Paths are resolved relative to the
/// manifest file; every missing path is reported, not just the first.
pub fn resolve_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut manifest: DatasetManifest = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
    if manifest.entries.is_empty() {
        return Err(Error::Config(format!(
            "manifest {} lists no entries",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut names = BTreeSet::new();
    let mut missing = Vec::new();
    for entry in manifest.entries.iter_mut() {
        if !names.insert(entry.name.clone()) {
            return Err(Error::Config(format!(
                "manifest {}: duplicate entry name '{}'",
                path.display(),
                entry.name
            )));
        }
        for field in [&mut entry.train_csv, &mut entry.test_csv] {
            if field.is_relative() {
                *field = base.join(&*field);
            }
            if !field.exists() {
                missing.push(format!("{} ({})", field.display(), entry.name));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "manifest {}: missing files: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(manifest)
}
