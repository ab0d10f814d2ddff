//! Patch-based transformer anomaly detector for time series.
//!
//! The pipeline: a sliding window over an `M`-modality stream is padded and
//! cut into overlapping patches, every patch is embedded and run through a
//! channel-independent transformer encoder, and a per-modality head
//! reconstructs the patches. Training minimizes the summed squared
//! reconstruction error; at detection time the error of the last patch (which
//! always contains the observation under test) is the anomaly score.
//!
//! Modules:
//! * [`tensor`] — dense tensors with reverse-mode autodiff (f32 + f64 modes)
//! * [`patch`] — window padding and patch extraction
//! * [`model`] — encoder configuration, parameters, and the forward pass
//! * [`train`] — Adam training loop over sliding windows
//! * [`checkpoint`] — binary model persistence
//! * [`detect`] — last-patch anomaly scoring over streams
//! * [`metrics`] — ROC-AUC (no point adjustment) and macro-averaging
//! * [`data`] — CSV ingestion, normalization, dataset manifests
//! * [`synth`] — synthetic series generators for tests and benchmarks

pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod error;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod synth;
pub mod tensor;
pub mod train;

pub use data::{DatasetManifest, LabeledTimeSeries, Normalizer, TimeSeries};
pub use detect::ScoreSeries;
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use model::{AttentionScale, ModelConfig, ModelState};
pub use patch::{PatchConfig, PatchedWindow};
pub use tensor::{graph::Graph, Scalar, Tensor};
pub use train::TrainConfig;
