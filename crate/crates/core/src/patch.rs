//! Window padding and patch extraction.
//!
//! A window holds the `w` most recent observations plus the observation under
//! test (`w + 1` values per modality). The stream is padded by repeating the
//! last value `stride` times, then cut into overlapping patches of length
//! `patch_len` advancing by `stride`; the padding guarantees the test
//! observation lands in the final patch. Each patch carries exactly one
//! modality (channel independence).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Patching geometry: window size `w`, patch length, and stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    /// Number of past observations in a window (the test observation is extra).
    pub window_w: usize,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn new(window_w: usize, patch_len: usize, stride: usize) -> Result<Self> {
        let cfg = Self {
            window_w,
            patch_len,
            stride,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.window_w + 1 {
            return Err(Error::Config(format!(
                "patch_len must be in 1..={}, got {}",
                self.window_w + 1,
                self.patch_len
            )));
        }
        if self.stride == 0 || self.stride > self.patch_len {
            // Strides beyond the patch length would skip observations inside
            // the window entirely.
            return Err(Error::Config(format!(
                "stride must be in 1..={} (the patch length), got {}",
                self.patch_len, self.stride
            )));
        }
        Ok(())
    }

    /// Length of a raw window including the test observation.
    pub fn window_len(&self) -> usize {
        self.window_w + 1
    }

    /// Length of the padded per-modality stream.
    pub fn padded_len(&self) -> usize {
        self.window_w + 1 + self.stride
    }

    /// Number of patches: `floor((w + 1 - patch_len) / stride) + 2`, which
    /// equals the count of stride-aligned patch starts that fit in the padded
    /// stream.
    pub fn num_patches(&self) -> Result<usize> {
        self.validate()?;
        Ok((self.window_w + 1 - self.patch_len) / self.stride + 2)
    }
}

/// One patched window: `(modalities, num_patches, patch_len)`.
#[derive(Clone, Debug)]
pub struct PatchedWindow<T> {
    pub data: Tensor<T>,
    pub num_patches: usize,
    /// Window-local index of the observation under test (always `window_w`).
    pub source_end_index: usize,
}

/// Appends `stride` copies of the last value to a per-modality stream.
pub fn pad_stream<T: Scalar>(window: &[T], stride: usize) -> Vec<T> {
    let mut padded = Vec::with_capacity(window.len() + stride);
    padded.extend_from_slice(window);
    if let Some(&last) = window.last() {
        padded.extend(std::iter::repeat_n(last, stride));
    }
    padded
}

/// Stride-aligned patch start offsets over the padded stream. This is the
/// counting construction the closed-form `num_patches` is checked against.
fn patch_starts(cfg: &PatchConfig) -> Vec<usize> {
    let padded = cfg.padded_len();
    (0..)
        .map(|i| i * cfg.stride)
        .take_while(|start| start + cfg.patch_len <= padded)
        .collect()
}

/// Patches a single `(M, w + 1)` window into `(M, num_patches, patch_len)`.
pub fn patchify<T: Scalar>(window: &Tensor<T>, cfg: &PatchConfig) -> Result<PatchedWindow<T>> {
    if window.rank() != 2 {
        return Err(Error::Shape(format!(
            "patchify expects an (M, w + 1) window, got {:?}",
            window.shape()
        )));
    }
    let modalities = window.shape()[0];
    let batched = window
        .clone()
        .reshaped(vec![1, modalities, window.shape()[1]])?;
    let data = patchify_batch(&batched, cfg)?;
    let num_patches = data.shape()[2];
    Ok(PatchedWindow {
        data: data.reshaped(vec![modalities, num_patches, cfg.patch_len])?,
        num_patches,
        source_end_index: cfg.window_w,
    })
}

/// Patches a `(B, M, w + 1)` batch of windows into `(B, M, num_patches,
/// patch_len)`. Each modality's patches are drawn from that modality only.
pub fn patchify_batch<T: Scalar>(windows: &Tensor<T>, cfg: &PatchConfig) -> Result<Tensor<T>> {
    let expected = cfg.num_patches()?;
    if windows.rank() != 3 || windows.shape()[2] != cfg.window_len() {
        return Err(Error::Shape(format!(
            "patchify expects (B, M, {}) windows, got {:?}",
            cfg.window_len(),
            windows.shape()
        )));
    }
    let starts = patch_starts(cfg);
    if starts.len() != expected {
        // The closed form and the counting construction are kept as a dual
        // route; a disagreement is a config error, never silently resolved.
        return Err(Error::Config(format!(
            "patch count formula gives {expected} but enumeration gives {} for {cfg:?}",
            starts.len()
        )));
    }
    let (batch, modalities, wlen) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    let mut out = Vec::with_capacity(batch * modalities * expected * cfg.patch_len);
    for b in 0..batch {
        for m in 0..modalities {
            let row = &windows.data()[(b * modalities + m) * wlen..(b * modalities + m + 1) * wlen];
            let padded = pad_stream(row, cfg.stride);
            for &start in &starts {
                out.extend_from_slice(&padded[start..start + cfg.patch_len]);
            }
        }
    }
    Tensor::from_vec(vec![batch, modalities, expected, cfg.patch_len], out)
}
