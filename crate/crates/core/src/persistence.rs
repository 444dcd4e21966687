//! File formats.
//!
//! A model checkpoint (`.rsym`) is the line `RSYM1` followed by a JSON
//! manifest holding the config and every tensor in canonical order; each
//! payload is base64 of little-endian IEEE-754 doubles, row-major. Datasets
//! (`.rsds`) are the line `RSDS1` followed by JSON. Reports are plain JSON
//! and loss curves CSV.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::analysis::LossCurve;
use crate::error::{Error, Result};
use crate::matching::MatchReport;
use crate::model::{canonical_layout, DataItem, SyntheticDataset, TransformerConfig, TransformerModel};

pub const MODEL_MAGIC: &str = "RSYM1";
pub const DATASET_MAGIC: &str = "RSDS1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    data: String,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    version: u32,
    config: TransformerConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    version: u32,
    seed: u64,
    items: Vec<DataItem>,
}

fn split_magic<'a>(bytes: &'a [u8], magic: &str) -> Result<&'a [u8]> {
    let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let first = String::from_utf8_lossy(&bytes[..end]);
    let first = first.trim_end_matches('\r');
    if first != magic {
        let shown: String = first.chars().take(16).collect();
        return Err(Error::Format(format!("bad magic `{shown}`, expected `{magic}`")));
    }
    Ok(bytes.get(end + 1..).unwrap_or(&[]))
}

fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64(name: &str, text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| Error::Integrity(format!("tensor {name}: bad payload: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Integrity(format!("tensor {name}: {} payload bytes, expected {}", bytes.len(), expected * 8)));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Canonical byte encoding; bit-equal models encode to identical bytes.
pub fn encode_model(model: &TransformerModel) -> Result<Vec<u8>> {
    model.validate()?;
    let manifest = ModelManifest {
        version: FORMAT_VERSION,
        config: model.config,
        tensors: model
            .named_tensors()
            .into_iter()
            .map(|(name, m)| TensorEntry { name, shape: [m.rows(), m.cols()], data: encode_f64(m.data()) })
            .collect(),
    };
    let mut out = format!("{MODEL_MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?);
    out.push(b'\n');
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<TransformerModel> {
    let body = split_magic(bytes, MODEL_MAGIC)?;
    let value: serde_json::Value =
        serde_json::from_slice(body).map_err(|e| Error::Integrity(format!("corrupt or truncated manifest: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Format(format!("unsupported checkpoint version {v}"))),
        None => return Err(Error::Integrity("manifest has no version".into())),
    }
    let manifest: ModelManifest =
        serde_json::from_value(value).map_err(|e| Error::Integrity(format!("malformed manifest: {e}")))?;
    manifest.config.validate()?;
    let layout = canonical_layout(&manifest.config);
    if layout.len() != manifest.tensors.len() {
        return Err(Error::Integrity(format!("{} tensors, config implies {}", manifest.tensors.len(), layout.len())));
    }
    let mut model = TransformerModel::zeros(manifest.config)?;
    for (((name, shape), entry), (_, dst)) in layout.iter().zip(&manifest.tensors).zip(model.named_tensors_mut()) {
        if *name != entry.name || [shape.0, shape.1] != entry.shape {
            return Err(Error::Integrity(format!(
                "tensor {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let data = decode_f64(name, &entry.data, shape.0 * shape.1)?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Value(format!("tensor {name} holds non-finite values")));
        }
        dst.data_mut().copy_from_slice(&data);
    }
    Ok(model)
}

pub fn save_model(model: &TransformerModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    decode_model(&fs::read(path)?)
}

pub fn encode_dataset(dataset: &SyntheticDataset) -> Result<Vec<u8>> {
    let manifest = DatasetManifest { version: FORMAT_VERSION, seed: dataset.seed, items: dataset.items.clone() };
    let mut out = format!("{DATASET_MAGIC}\n").into_bytes();
    out.extend(serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?);
    out.push(b'\n');
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SyntheticDataset> {
    let body = split_magic(bytes, DATASET_MAGIC)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("malformed dataset: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    Ok(SyntheticDataset { items: manifest.items, seed: manifest.seed })
}

pub fn save_dataset(dataset: &SyntheticDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(dataset)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn report_json(report: &MatchReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save_report(report: &MatchReport, path: &Path) -> Result<()> {
    fs::write(path, report_json(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<MatchReport> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format(format!("malformed report: {e}")))
}

pub fn save_curve(curve: &LossCurve, path: &Path) -> Result<()> {
    fs::write(path, curve.to_csv())?;
    Ok(())
}

pub fn load_curve(path: &Path) -> Result<LossCurve> {
    LossCurve::from_csv(&fs::read_to_string(path)?)
}
