//! JSON model files for meta-trained detectors and packet autoencoders.
//!
//! Every file is a JSON object whose `magic` field names the format
//! version, followed by metadata and tensor lists of `{name, shape, data}`.
//! Floats are written with shortest round-trip formatting, so loading a
//! saved model reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackboneSpec, NamedTensor, ParamSet, Tensor};
use crate::autoencoder::{AutoencoderModel, AutoencoderSpec, Normalizer};
use crate::classifier::InputScaler;
use crate::error::{Error, Result};
use crate::meta::{EpisodeConfig, LabelSpace, MetaModel, MetaParams};

pub const MODEL_MAGIC: &str = "meta-uad-model-v1";
const META_KIND: &str = "meta-sgd";
const AE_KIND: &str = "autoencoder";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn records(p: &ParamSet) -> Vec<TensorRecord> {
    p.iter()
        .map(|(name, t)| TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn param_set(group: &str, recs: Vec<TensorRecord>) -> Result<ParamSet> {
    let entries = recs
        .into_iter()
        .map(|r| {
            let tensor = Tensor::new(r.shape.clone(), r.data).map_err(|_| {
                Error::Format(format!(
                    "{group} tensor {:?}: data length does not match shape {:?}",
                    r.name, r.shape
                ))
            })?;
            Ok(NamedTensor { name: r.name, tensor })
        })
        .collect::<Result<Vec<_>>>()?;
    ParamSet::from_entries(entries).map_err(|e| Error::Format(format!("{group}: {e}")))
}

/// Checks names and shapes against a reference set, naming the first mismatch.
fn check_shapes(group: &str, got: &ParamSet, want: &ParamSet) -> Result<()> {
    if got.len() != want.len() {
        return Err(Error::Format(format!(
            "{group} has {} tensors, expected {}",
            got.len(),
            want.len()
        )));
    }
    for ((gn, gt), (wn, wt)) in got.iter().zip(want.iter()) {
        if gn != wn {
            return Err(Error::Format(format!("{group} tensor {gn:?} found where {wn:?} was expected")));
        }
        if gt.shape() != wt.shape() {
            return Err(Error::Format(format!(
                "{group} tensor {gn:?} has shape {:?}, expected {:?}",
                gt.shape(),
                wt.shape()
            )));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    magic: String,
    kind: String,
    spec: BackboneSpec,
    scaler: InputScaler,
    labels: LabelSpace,
    config: EpisodeConfig,
    theta: Vec<TensorRecord>,
    alpha: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AeFile {
    magic: String,
    kind: String,
    spec: AutoencoderSpec,
    normalizer: Normalizer,
    params: Vec<TensorRecord>,
}

fn parse_error(e: serde_json::Error) -> Error {
    if e.is_eof() {
        Error::Format("model file is truncated".into())
    } else {
        Error::Format(format!("malformed model file: {e}"))
    }
}

/// Parses `bytes`, checking magic and kind before the full schema.
fn decode<T: DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(parse_error)?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(MODEL_MAGIC) => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "unsupported model version {other:?}, expected {MODEL_MAGIC:?}"
            )))
        }
        None => return Err(Error::Format("not a model file: no magic field".into())),
    }
    match value.get("kind").and_then(|k| k.as_str()) {
        Some(k) if k == kind => {}
        other => {
            return Err(Error::Format(format!(
                "expected a {kind} model, file holds {}",
                other.unwrap_or("an unknown kind")
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("malformed {kind} model: {e}")))
}

pub fn meta_model_to_bytes(m: &MetaModel) -> Result<Vec<u8>> {
    let file = MetaFile {
        magic: MODEL_MAGIC.into(),
        kind: META_KIND.into(),
        spec: m.spec.clone(),
        scaler: m.scaler.clone(),
        labels: m.labels.clone(),
        config: m.config.clone(),
        theta: records(&m.meta.theta),
        alpha: records(&m.meta.alpha),
    };
    serde_json::to_vec(&file).map_err(|e| Error::Format(e.to_string()))
}

pub fn meta_model_from_bytes(bytes: &[u8]) -> Result<MetaModel> {
    let f: MetaFile = decode(bytes, META_KIND)?;
    let want = f.spec.zeros();
    let theta = param_set("theta", f.theta)?;
    check_shapes("theta", &theta, &want)?;
    let alpha = param_set("alpha", f.alpha)?;
    check_shapes("alpha", &alpha, &want)?;
    if f.scaler.dim() != f.spec.input_dim {
        return Err(Error::Format(format!(
            "input scaler has dimension {}, backbone expects {}",
            f.scaler.dim(),
            f.spec.input_dim
        )));
    }
    Ok(MetaModel {
        spec: f.spec,
        scaler: f.scaler,
        labels: f.labels,
        config: f.config,
        meta: MetaParams::new(theta, alpha)?,
    })
}

pub fn autoencoder_to_bytes(m: &AutoencoderModel) -> Result<Vec<u8>> {
    let file = AeFile {
        magic: MODEL_MAGIC.into(),
        kind: AE_KIND.into(),
        spec: m.spec.clone(),
        normalizer: m.normalizer.clone(),
        params: records(&m.params),
    };
    serde_json::to_vec(&file).map_err(|e| Error::Format(e.to_string()))
}

pub fn autoencoder_from_bytes(bytes: &[u8]) -> Result<AutoencoderModel> {
    let f: AeFile = decode(bytes, AE_KIND)?;
    f.spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    let params = param_set("autoencoder", f.params)?;
    f.spec.check(&params)?;
    Ok(AutoencoderModel {
        spec: f.spec,
        normalizer: f.normalizer,
        params,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_meta_model(path: &Path, m: &MetaModel) -> Result<()> {
    write(path, &meta_model_to_bytes(m)?)
}

pub fn load_meta_model(path: &Path) -> Result<MetaModel> {
    meta_model_from_bytes(&read(path)?)
}

pub fn save_autoencoder(path: &Path, m: &AutoencoderModel) -> Result<()> {
    write(path, &autoencoder_to_bytes(m)?)
}

pub fn load_autoencoder(path: &Path) -> Result<AutoencoderModel> {
    autoencoder_from_bytes(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model() -> MetaModel {
        let spec = BackboneSpec::with_hidden(3, vec![4], 2);
        let meta = MetaParams::init(&spec, 0.01, &mut rng::stream(1, "t", 0));
        MetaModel {
            spec,
            scaler: InputScaler::fit(&[vec![1.0, 2.0, 3.0], vec![0.1, 0.7, 1e-9]]).unwrap(),
            labels: LabelSpace::for_classes(&["a".into(), "b".into()], 2),
            config: EpisodeConfig::default(),
            meta,
        }
    }

    #[test]
    fn meta_round_trip_is_exact() {
        let m = model();
        let bytes = meta_model_to_bytes(&m).unwrap();
        let back = meta_model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn old_magic_is_a_version_error() {
        let text = String::from_utf8(meta_model_to_bytes(&model()).unwrap()).unwrap();
        let old = text.replace(MODEL_MAGIC, "meta-uad-model-v0");
        let err = meta_model_from_bytes(old.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("version")), "{err}");
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let bytes = meta_model_to_bytes(&model()).unwrap();
        let err = meta_model_from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("truncated")), "{err}");
    }

    #[test]
    fn wrong_shape_names_the_tensor() {
        let text = String::from_utf8(meta_model_to_bytes(&model()).unwrap()).unwrap();
        let bad = text.replacen("\"shape\":[4]", "\"shape\":[2,2]", 1);
        let err = meta_model_from_bytes(bad.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("dense0.bias")), "{err}");
    }

    #[test]
    fn kinds_are_not_interchangeable() {
        let bytes = meta_model_to_bytes(&model()).unwrap();
        assert!(matches!(autoencoder_from_bytes(&bytes), Err(Error::Format(_))));
    }
}
