//! Binary model persistence.
//!
//! Layout: the magic bytes `PTAD`, a little-endian `u32` format version, a
//! length-prefixed UTF-8 JSON metadata document (model config, optional train
//! config, optional normalizer statistics, and the named-tensor manifest),
//! followed by the raw little-endian `f32` tensor payloads in manifest order.
//! Round-trips are bitwise lossless, including batchnorm running statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchNormParams, EncoderLayer, ModelConfig, ModelState};
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::Normalizer;

pub const MAGIC: &[u8; 4] = b"PTAD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    train: Option<TrainConfig>,
    normalizer: Option<Normalizer>,
    tensors: Vec<TensorEntry>,
}

/// Every persisted tensor with its manifest name, in a stable order: the
/// projection, the fixed positional table, per-layer weights with batchnorm
/// parameters and running statistics, then the per-modality heads.
fn named_tensors(state: &ModelState<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = vec![
        ("w_proj".to_string(), state.w_proj.clone()),
        ("w_pe".to_string(), state.w_pe.clone()),
    ];
    for (i, layer) in state.layers.iter().enumerate() {
        out.push((format!("layers.{i}.w_q"), layer.w_q.clone()));
        out.push((format!("layers.{i}.w_k"), layer.w_k.clone()));
        out.push((format!("layers.{i}.w_v"), layer.w_v.clone()));
        out.push((format!("layers.{i}.w_o"), layer.w_o.clone()));
        out.push((format!("layers.{i}.ffn_w1"), layer.ffn_w1.clone()));
        out.push((format!("layers.{i}.ffn_w2"), layer.ffn_w2.clone()));
        for (block, bn) in [("bn_attn", &layer.bn_attn), ("bn_ffn", &layer.bn_ffn)] {
            out.push((format!("layers.{i}.{block}.gamma"), bn.gamma.clone()));
            out.push((format!("layers.{i}.{block}.beta"), bn.beta.clone()));
            out.push((
                format!("layers.{i}.{block}.running_mean"),
                Tensor::from_vec(vec![bn.running_mean.len()], bn.running_mean.clone())
                    .expect("vector tensor"),
            ));
            out.push((
                format!("layers.{i}.{block}.running_var"),
                Tensor::from_vec(vec![bn.running_var.len()], bn.running_var.clone())
                    .expect("vector tensor"),
            ));
        }
    }
    for (m, head) in state.patch_heads.iter().enumerate() {
        out.push((format!("patch_heads.{m}"), head.clone()));
    }
    out
}

pub fn save_checkpoint(
    state: &ModelState<f32>,
    train_cfg: Option<&TrainConfig>,
    path: &Path,
) -> Result<()> {
    let tensors = named_tensors(state);
    let metadata = Metadata {
        model: state.cfg.clone(),
        train: train_cfg.cloned(),
        normalizer: state.normalizer.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&metadata)
        .map_err(|e| Error::Format(format!("cannot encode checkpoint metadata: {e}")))?;

    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(MAGIC)?;
    writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
    writer.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    writer.write_all(&meta_bytes)?;
    for (_, tensor) in &tensors {
        for &v in tensor.data() {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn read_exact_or_truncated(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("checkpoint truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState<f32>, Option<TrainConfig>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint file: expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut word = [0u8; 4];
    read_exact_or_truncated(&mut reader, &mut word, "format version")?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    read_exact_or_truncated(&mut reader, &mut word, "metadata length")?;
    let meta_len = u32::from_le_bytes(word) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_or_truncated(&mut reader, &mut meta_bytes, "metadata")?;
    let metadata: Metadata = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    metadata.model.validate()?;

    let mut tensors = Vec::with_capacity(metadata.tensors.len());
    for entry in &metadata.tensors {
        let count = crate::tensor::numel(&entry.shape);
        let mut bytes = vec![0u8; count * 4];
        read_exact_or_truncated(&mut reader, &mut bytes, &format!("tensor '{}'", entry.name))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((
            entry.name.clone(),
            Tensor::from_vec(entry.shape.clone(), data)?,
        ));
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "checkpoint has trailing bytes beyond the declared tensors".into(),
        ));
    }

    let state = assemble_state(&metadata.model, metadata.normalizer, tensors)?;
    Ok((state, metadata.train))
}

fn assemble_state(
    cfg: &ModelConfig,
    normalizer: Option<Normalizer>,
    tensors: Vec<(String, Tensor<f32>)>,
) -> Result<ModelState<f32>> {
    let mut map: std::collections::HashMap<String, Tensor<f32>> = tensors.into_iter().collect();
    let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor<f32>> {
        let tensor = map
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor '{name}' has shape {:?} but the checkpoint's model config implies {shape:?}",
                tensor.shape()
            )));
        }
        Ok(tensor)
    };

    let d = cfg.d_model;
    let p_num = cfg.num_patches()?;
    let p_len = cfg.patch.patch_len;
    let (hk, hv) = (cfg.n_heads * cfg.d_k, cfg.n_heads * cfg.d_v);
    let ffn = cfg.ffn_mult * d;

    let w_proj = take("w_proj".into(), vec![p_len, d])?;
    let w_pe = take("w_pe".into(), vec![p_num, d])?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let mut bn = |block: &str| -> Result<BatchNormParams<f32>> {
            Ok(BatchNormParams {
                gamma: take(format!("layers.{i}.{block}.gamma"), vec![d])?,
                beta: take(format!("layers.{i}.{block}.beta"), vec![d])?,
                running_mean: take(format!("layers.{i}.{block}.running_mean"), vec![d])?
                    .into_data(),
                running_var: take(format!("layers.{i}.{block}.running_var"), vec![d])?.into_data(),
            })
        };
        let bn_attn = bn("bn_attn")?;
        let bn_ffn = bn("bn_ffn")?;
        layers.push(EncoderLayer {
            w_q: take(format!("layers.{i}.w_q"), vec![d, hk])?,
            w_k: take(format!("layers.{i}.w_k"), vec![d, hk])?,
            w_v: take(format!("layers.{i}.w_v"), vec![d, hv])?,
            w_o: take(format!("layers.{i}.w_o"), vec![hv, d])?,
            ffn_w1: take(format!("layers.{i}.ffn_w1"), vec![d, ffn])?,
            ffn_w2: take(format!("layers.{i}.ffn_w2"), vec![ffn, d])?,
            bn_attn,
            bn_ffn,
        });
    }
    let mut patch_heads = Vec::with_capacity(cfg.n_modalities);
    for m in 0..cfg.n_modalities {
        patch_heads.push(take(format!("patch_heads.{m}"), vec![d, p_len])?);
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint carries unexpected tensor '{extra}'"
        )));
    }
    Ok(ModelState {
        cfg: cfg.clone(),
        w_proj,
        w_pe,
        layers,
        patch_heads,
        normalizer,
    })
}
