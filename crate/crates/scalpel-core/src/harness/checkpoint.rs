//! Manifest-plus-blob tensor serialization.
//!
//! A checkpoint is a JSON manifest `<stem>.json` describing tensor layout
//! plus a little-endian row-major f64 blob `<stem>.bin`. Round-trips are
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Layer, LayerKind, ModelCheckpoint, ModelMeta};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    #[serde(default)]
    kind: Option<LayerKind>,
    #[serde(default)]
    prunable: Option<bool>,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<ModelMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra: Option<serde_json::Value>,
    tensors: Vec<TensorRecord>,
}

fn blob_paths(stem: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn write_tensor(blob: &mut Vec<u8>, m: &Mat) -> (u64, u64) {
    let offset = blob.len() as u64;
    for v in m.iter() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    (offset, (m.len() * 8) as u64)
}

fn read_tensor(blob: &[u8], rec: &TensorRecord) -> Result<Mat> {
    if rec.dtype != "f64" {
        return Err(CoreError::Checkpoint(format!(
            "unsupported dtype `{}`",
            rec.dtype
        )));
    }
    if rec.shape.len() != 2 {
        return Err(CoreError::Checkpoint(format!(
            "tensor `{}` is not two-dimensional",
            rec.name
        )));
    }
    let (rows, cols) = (rec.shape[0], rec.shape[1]);
    let start = rec.offset as usize;
    let len = rec.length as usize;
    if len != rows * cols * 8 || start + len > blob.len() {
        return Err(CoreError::Checkpoint(format!(
            "tensor `{}` out of bounds",
            rec.name
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in blob[start..start + len].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Mat::from_shape_vec((rows, cols), data)
        .map_err(|e| CoreError::Checkpoint(format!("tensor `{}`: {e}", rec.name)))
}

/// Writes `<stem>.json` and `<stem>.bin` for a model.
pub fn save_model(model: &ModelCheckpoint, stem: impl AsRef<Path>) -> Result<()> {
    let (json_path, bin_path) = blob_paths(stem.as_ref());
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (offset, length) = write_tensor(&mut blob, &layer.weight);
        tensors.push(TensorRecord {
            name: layer.name.clone(),
            kind: Some(layer.kind),
            prunable: Some(layer.prunable),
            shape: vec![layer.weight.nrows(), layer.weight.ncols()],
            dtype: "f64".into(),
            offset,
            length,
        });
    }
    let manifest = Manifest {
        meta: Some(model.meta.clone()),
        extra: None,
        tensors,
    };
    std::fs::write(&json_path, serde_json::to_vec_pretty(&manifest).unwrap())?;
    std::fs::write(&bin_path, blob)?;
    Ok(())
}

pub fn load_model(stem: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let (json_path, bin_path) = blob_paths(stem.as_ref());
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&json_path)?)
        .map_err(|e| CoreError::Checkpoint(format!("manifest parse: {e}")))?;
    let blob = std::fs::read(&bin_path)?;
    let meta = manifest
        .meta
        .clone()
        .ok_or_else(|| CoreError::Checkpoint("manifest has no model meta".into()))?;
    let mut layers = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        layers.push(Layer {
            name: rec.name.clone(),
            kind: rec.kind.unwrap_or(LayerKind::Linear),
            weight: read_tensor(&blob, rec)?,
            prunable: rec.prunable.unwrap_or(true),
        });
    }
    Ok(ModelCheckpoint { layers, meta })
}

/// Writes an arbitrary named tensor set (curvature snapshots, resume state)
/// in the same manifest+blob layout, with an opaque JSON `extra` payload.
pub fn save_tensors(
    stem: impl AsRef<Path>,
    tensors: &[(String, &Mat)],
    extra: Option<serde_json::Value>,
) -> Result<()> {
    let (json_path, bin_path) = blob_paths(stem.as_ref());
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let (offset, length) = write_tensor(&mut blob, m);
        records.push(TensorRecord {
            name: name.clone(),
            kind: None,
            prunable: None,
            shape: vec![m.nrows(), m.ncols()],
            dtype: "f64".into(),
            offset,
            length,
        });
    }
    let manifest = Manifest {
        meta: None,
        extra,
        tensors: records,
    };
    std::fs::write(&json_path, serde_json::to_vec_pretty(&manifest).unwrap())?;
    std::fs::write(&bin_path, blob)?;
    Ok(())
}

pub type TensorArchive = (Vec<(String, Mat)>, Option<serde_json::Value>);

pub fn load_tensors(stem: impl AsRef<Path>) -> Result<TensorArchive> {
    let (json_path, bin_path) = blob_paths(stem.as_ref());
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&json_path)?)
        .map_err(|e| CoreError::Checkpoint(format!("manifest parse: {e}")))?;
    let blob = std::fs::read(&bin_path)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        out.push((rec.name.clone(), read_tensor(&blob, rec)?));
    }
    Ok((out, manifest.extra))
}

#[cfg(test)]
mod tests {
    use super::super::model::{build_model, ModelConfig};
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = build_model(
            &ModelConfig::Mlp {
                vocab_size: 27,
                hidden: vec![8, 8],
            },
            7,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("scalpel_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("model");
        save_model(&model, &stem).unwrap();
        let loaded = load_model(&stem).unwrap();
        assert_eq!(model.layers.len(), loaded.layers.len());
        for (a, b) in model.layers.iter().zip(&loaded.layers) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.prunable, b.prunable);
            assert_eq!(a.weight.shape(), b.weight.shape());
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Saving the loaded model reproduces identical bytes.
        let stem2 = dir.join("model2");
        save_model(&loaded, &stem2).unwrap();
        assert_eq!(
            std::fs::read(stem.with_extension("bin")).unwrap(),
            std::fs::read(stem2.with_extension("bin")).unwrap()
        );
        assert_eq!(
            std::fs::read(stem.with_extension("json")).unwrap(),
            std::fs::read(stem2.with_extension("json")).unwrap()
        );
    }

    #[test]
    fn tensor_archive_round_trip() {
        let m1 = Mat::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.25 - 1.0);
        let m2 = Mat::from_shape_fn((2, 2), |(i, j)| -((i + j) as f64));
        let dir = std::env::temp_dir().join("scalpel_tensors_test");
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("snap");
        save_tensors(
            &stem,
            &[("a.g".to_string(), &m1), ("a.a".to_string(), &m2)],
            Some(serde_json::json!({"shot": 3})),
        )
        .unwrap();
        let (tensors, extra) = load_tensors(&stem).unwrap();
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].1, m1);
        assert_eq!(tensors[1].1, m2);
        assert_eq!(extra.unwrap()["shot"], 3);
    }
}
