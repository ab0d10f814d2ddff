//! Run configuration: a TOML file with dataset, patch, model, train, and
//! output sections. Unknown keys are rejected everywhere; individual keys can
//! be overridden from the command line with `--set section.key=value`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use patchtrad::data::{resolve_manifest, ManifestEntry};
use patchtrad::model::{AttentionScale, ModelConfig};
use patchtrad::patch::PatchConfig;
use patchtrad::train::TrainConfig;
use patchtrad::{Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub patch: PatchSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub name: Option<String>,
    pub manifest: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub label_column: Option<String>,
    pub window: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSection {
    pub patch_len: usize,
    pub stride: usize,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: Option<usize>,
    pub d_v: Option<usize>,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub attention_scale: AttentionScale,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_k: None,
            d_v: None,
            n_layers: 3,
            ffn_mult: 2,
            dropout: 0.1,
            attention_scale: AttentionScale::DModel,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub window_stride: usize,
    pub clip_max_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            seed: d.seed,
            window_stride: d.window_stride,
            clip_max_norm: d.clip_max_norm,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub score_batch_size: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            score_batch_size: 128,
        }
    }
}

/// One resolved train/test pair; a plain dataset behaves as a single entry.
#[derive(Clone, Debug)]
pub struct ResolvedEntry {
    pub name: String,
    pub train_csv: PathBuf,
    pub test_csv: Option<PathBuf>,
    pub label_column: Option<String>,
}

impl RunConfig {
    /// Parses the config file and applies `--set key=value` overrides before
    /// deserializing, so overrides go through the same unknown-key rejection.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dataset paths are relative to the config file so runs are
    /// reproducible from any working directory.
    fn resolve_paths(&mut self, base: &Path) {
        for field in [
            &mut self.dataset.manifest,
            &mut self.dataset.train_csv,
            &mut self.dataset.test_csv,
        ]
        .into_iter()
        .flatten()
        {
            if field.is_relative() {
                *field = base.join(&*field);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_config().validate()?;
        self.train_config().validate()?;
        // Probe the model section with a placeholder modality count; the
        // real count is only known once data is loaded.
        self.model_config(1)?.validate()?;
        if self.output.score_batch_size == 0 {
            return Err(Error::Config(
                "output.score_batch_size must be at least 1".into(),
            ));
        }
        match (&self.dataset.manifest, &self.dataset.train_csv) {
            (Some(_), Some(_)) => Err(Error::Config(
                "dataset.manifest and dataset.train_csv are mutually exclusive".into(),
            )),
            (None, None) => Err(Error::Config(
                "dataset needs either a manifest or a train_csv".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Human-readable dataset name for reports.
    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.dataset.name {
            return name.clone();
        }
        "dataset".to_string()
    }

    /// Expands the dataset section into concrete entries, validating that
    /// every referenced file exists before any command does work.
    pub fn resolve_entries(&self) -> Result<Vec<ResolvedEntry>> {
        if let Some(manifest_path) = &self.dataset.manifest {
            let manifest = resolve_manifest(manifest_path)?;
            return Ok(manifest
                .entries
                .into_iter()
                .map(
                    |ManifestEntry {
                         name,
                         train_csv,
                         test_csv,
                         label_column,
                     }| ResolvedEntry {
                        name,
                        train_csv,
                        test_csv: Some(test_csv),
                        label_column: Some(label_column),
                    },
                )
                .collect());
        }
        let train_csv = self
            .dataset
            .train_csv
            .clone()
            .expect("validated: train_csv present without manifest");
        let mut missing = Vec::new();
        if !train_csv.exists() {
            missing.push(train_csv.display().to_string());
        }
        if let Some(test) = &self.dataset.test_csv {
            if !test.exists() {
                missing.push(test.display().to_string());
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "missing files: {}",
                missing.join(", ")
            )));
        }
        Ok(vec![ResolvedEntry {
            name: self
                .dataset
                .name
                .clone()
                .unwrap_or_else(|| "dataset".into()),
            train_csv,
            test_csv: self.dataset.test_csv.clone(),
            label_column: self.dataset.label_column.clone(),
        }])
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            window_w: self.dataset.window,
            patch_len: self.patch.patch_len,
            stride: self.patch.stride,
        }
    }

    /// Builds the model config once the modality count is known. Per-head
    /// widths default to `d_model / n_heads` and must then divide evenly.
    pub fn model_config(&self, n_modalities: usize) -> Result<ModelConfig> {
        self.model_config_for_patch(self.patch_config(), n_modalities)
    }

    pub fn model_config_for_patch(
        &self,
        patch: PatchConfig,
        n_modalities: usize,
    ) -> Result<ModelConfig> {
        let m = &self.model;
        let default_width = || -> Result<usize> {
            if m.n_heads == 0 || !m.d_model.is_multiple_of(m.n_heads) {
                return Err(Error::Config(format!(
                    "d_model {} is not divisible by n_heads {}; set model.d_k and model.d_v explicitly",
                    m.d_model, m.n_heads
                )));
            }
            Ok(m.d_model / m.n_heads)
        };
        let d_k = match m.d_k {
            Some(v) => v,
            None => default_width()?,
        };
        let d_v = match m.d_v {
            Some(v) => v,
            None => default_width()?,
        };
        Ok(ModelConfig {
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_k,
            d_v,
            n_layers: m.n_layers,
            ffn_mult: m.ffn_mult,
            dropout_p: m.dropout,
            attention_scale: m.attention_scale,
            patch,
            n_modalities,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            seed: t.seed,
            window_stride: t.window_stride,
            clip_max_norm: t.clip_max_norm,
        }
    }
}

/// Applies one `section.key=value` override onto the parsed TOML document.
/// The value is parsed as TOML when possible and falls back to a string.
fn apply_override(doc: &mut toml::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override '{entry}' must look like section.key=value"
        ))
    })?;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!(
            "override '{entry}' has an empty path segment"
        )));
    }
    let mut cursor = doc;
    for segment in &segments[..segments.len() - 1] {
        let table = cursor.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override '{entry}': '{segment}' is not a table"))
        })?;
        cursor = table
            .entry((*segment).to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{entry}' does not point into a table")))?;
    let parsed: toml::Value = raw
        .parse()
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    table.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("run.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn minimal(dir: &Path) -> PathBuf {
        std::fs::write(dir.join("train.csv"), "v\n1\n2\n3\n").unwrap();
        write_config(
            dir,
            r#"
[dataset]
train_csv = "train.csv"
window = 16

[patch]
patch_len = 8
stride = 6
"#,
        )
    }

    #[test]
    fn defaults_fill_optional_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = minimal(dir.path());
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.output.dir, PathBuf::from("out"));
        let model = cfg.model_config(3).unwrap();
        assert_eq!(model.d_k, 16);
        assert_eq!(model.n_modalities, 3);
        // Dataset paths resolve relative to the config file.
        assert!(cfg.dataset.train_csv.unwrap().is_absolute());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.csv"), "v\n1\n").unwrap();
        let path = write_config(
            dir.path(),
            r#"
[dataset]
train_csv = "train.csv"
window = 16
typo_key = 3

[patch]
patch_len = 8
stride = 6
"#,
        );
        let err = RunConfig::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("typo_key"), "{err}");
    }

    #[test]
    fn overrides_apply_and_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = minimal(dir.path());
        let cfg = RunConfig::load(
            &path,
            &[
                "train.epochs=3".into(),
                "model.dropout=0.25".into(),
                "dataset.name=run1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!((cfg.model.dropout - 0.25).abs() < 1e-12);
        assert_eq!(cfg.dataset_name(), "run1");

        let err = RunConfig::load(&path, &["model.bogus=1".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::load(&path, &["no_equals".into()]).unwrap_err();
        assert!(err.to_string().contains("section.key=value"));
    }

    #[test]
    fn stride_beyond_patch_is_rejected_before_any_work() {
        let dir = tempfile::tempdir().unwrap();
        let path = minimal(dir.path());
        let err = RunConfig::load(&path, &["patch.stride=12".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn indivisible_head_width_needs_explicit_dk() {
        let dir = tempfile::tempdir().unwrap();
        let path = minimal(dir.path());
        let err = RunConfig::load(&path, &["model.n_heads=3".into()]).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        let cfg = RunConfig::load(
            &path,
            &[
                "model.n_heads=3".into(),
                "model.d_k=4".into(),
                "model.d_v=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model_config(1).unwrap().d_k, 4);
    }

    #[test]
    fn manifest_and_train_csv_are_mutually_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.csv"), "v\n1\n").unwrap();
        std::fs::write(dir.path().join("m.toml"), "name = \"x\"\n").unwrap();
        let path = write_config(
            dir.path(),
            r#"
[dataset]
train_csv = "train.csv"
manifest = "m.toml"
window = 16

[patch]
patch_len = 8
stride = 6
"#,
        );
        let err = RunConfig::load(&path, &[]).unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"));
    }

    #[test]
    fn missing_dataset_files_reported_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
[dataset]
train_csv = "absent.csv"
test_csv = "also_absent.csv"
window = 16

[patch]
patch_len = 8
stride = 6
"#,
        );
        let cfg = RunConfig::load(&path, &[]).unwrap();
        let err = cfg.resolve_entries().unwrap_err().to_string();
        assert!(
            err.contains("absent.csv") && err.contains("also_absent.csv"),
            "{err}"
        );
    }
}
