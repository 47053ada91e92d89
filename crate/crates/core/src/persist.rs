//! Model files: one JSON document holding the format version, the network
//! spec, the preprocessing needed to reproduce input normalization, and every
//! parameter tensor as an explicit shape plus a flat row-major value list.
//! Values are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Preprocessing;
use crate::error::{Error, Result};
use crate::network::{ModelParams, NetworkSpec, FORMAT_VERSION};
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct ModelDocument<'a> {
    format_version: u64,
    spec: &'a NetworkSpec,
    preprocessing: Option<&'a Preprocessing>,
    tensors: Vec<TensorRecord>,
}

fn persistence(field: impl Into<String>, message: impl std::fmt::Display) -> Error {
    Error::Persistence {
        field: field.into(),
        message: message.to_string(),
    }
}

/// Serializes a model (and optionally its preprocessing) to the model-file
/// text, newline terminated.
pub fn model_to_json<S: Scalar>(model: &ModelParams<S>, preprocessing: Option<&Preprocessing>) -> Result<String> {
    model.validate()?;
    let tensors = model
        .tensor_names()
        .into_iter()
        .zip(model.tensors())
        .map(|(name, t)| TensorRecord {
            name,
            shape: t.shape().to_vec(),
            values: t.iter().map(|v| v.to_f64_lossy()).collect(),
        })
        .collect();
    let doc = ModelDocument {
        format_version: FORMAT_VERSION,
        spec: &model.spec,
        preprocessing,
        tensors,
    };
    let mut text = serde_json::to_string(&doc).map_err(|e| persistence("<document>", e))?;
    text.push('\n');
    Ok(text)
}

fn field<'a>(doc: &'a Value, name: &str) -> Result<&'a Value> {
    doc.get(name).ok_or_else(|| persistence(name, "missing"))
}

/// Parses model-file text. No model is returned unless every field is
/// present, well-formed, and consistent with the spec.
pub fn model_from_json<S: Scalar>(text: &str) -> Result<(ModelParams<S>, Option<Preprocessing>)> {
    let doc: Value = serde_json::from_str(text).map_err(|e| persistence("<document>", e))?;
    if !doc.is_object() {
        return Err(persistence("<document>", "expected a JSON object"));
    }
    let version = field(&doc, "format_version")?
        .as_u64()
        .ok_or_else(|| persistence("format_version", "expected a non-negative integer"))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let spec: NetworkSpec =
        serde_json::from_value(field(&doc, "spec")?.clone()).map_err(|e| persistence("spec", e))?;
    spec.validate().map_err(|e| persistence("spec", e))?;
    let preprocessing: Option<Preprocessing> = match doc.get("preprocessing") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| persistence("preprocessing", e))?),
    };
    if let Some(p) = &preprocessing {
        if p.feature_names.len() != p.stats.mean.len() || p.stats.mean.len() != p.stats.std.len() {
            return Err(persistence("preprocessing.stats", "length does not match feature_names"));
        }
    }
    let records = field(&doc, "tensors")?
        .as_array()
        .ok_or_else(|| persistence("tensors", "expected an array"))?;

    // Parameters are shaped by the spec, then overwritten from the file.
    let mut model = ModelParams::<S>::init(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names = model.tensor_names();
    if records.len() != names.len() {
        return Err(persistence(
            "tensors",
            format!("expected {} tensors, found {}", names.len(), records.len()),
        ));
    }
    for (i, ((record, expected_name), mut target)) in
        records.iter().zip(&names).zip(model.tensors_mut()).enumerate()
    {
        let path = format!("tensors[{i}]");
        let record: TensorRecord =
            serde_json::from_value(record.clone()).map_err(|e| persistence(&path, e))?;
        if &record.name != expected_name {
            return Err(persistence(
                format!("{path}.name"),
                format!("expected `{expected_name}`, found `{}`", record.name),
            ));
        }
        if record.shape != target.shape() {
            return Err(persistence(
                format!("{path}.shape"),
                format!("expected {:?}, found {:?}", target.shape(), record.shape),
            ));
        }
        if record.values.len() != target.len() {
            return Err(persistence(
                format!("{path}.values"),
                format!("expected {} values, found {}", target.len(), record.values.len()),
            ));
        }
        for (dst, &src) in target.iter_mut().zip(&record.values) {
            *dst = S::lit(src);
        }
    }
    model.validate().map_err(|e| persistence("tensors", e))?;
    Ok((model, preprocessing))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partially written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_model<S: Scalar>(
    path: impl AsRef<Path>,
    model: &ModelParams<S>,
    preprocessing: Option<&Preprocessing>,
) -> Result<()> {
    write_atomic(path, model_to_json(model, preprocessing)?.as_bytes())
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<S>, Option<Preprocessing>)> {
    model_from_json(&std::fs::read_to_string(path)?)
}
