//! Conversion of publicly distributed encoder checkpoints into the named-array container.
//!
//! Accepted input is a plain safetensors file using timm / torch-hub naming
//! (DinoV2, MAE) or the segment-anything naming (SAM, MedSAM). Keys are mapped
//! onto the backbone's parameter names, checked against the preset shapes and
//! written with [`crate::container::save`].

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::Dtype as StDtype;
use safetensors::SafeTensors;
use serde_json::json;

use crate::backbones::{Backbone, BackboneSpec};
use crate::container::{self, NamedArrays};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};

/// Prefixes that wrap the encoder in common checkpoints.
const WRAPPERS: [&str; 5] = ["module.", "model.", "image_encoder.", "backbone.", "encoder."];

/// Read every array of a plain safetensors file as `f32`.
pub fn read_safetensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        array: "<header>".into(),
        reason: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let dtype = match view.dtype() {
            StDtype::F32 => DType::F32,
            StDtype::F16 => DType::F16,
            StDtype::BF16 => DType::BF16,
            StDtype::F64 => DType::F64,
            other => {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    array: name,
                    reason: format!("unsupported dtype {other:?}"),
                })
            }
        };
        let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), &Device::Cpu)?.to_dtype(DType::F32)?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Backbone parameter name for a checkpoint key, or `None` when the key
/// belongs to something other than the plain ViT encoder.
pub fn map_key(key: &str) -> Option<String> {
    let mut k = key;
    while let Some(rest) = WRAPPERS.iter().find_map(|p| k.strip_prefix(p)) {
        k = rest;
    }
    let k = k.replace(".mlp.lin1.", ".mlp.fc1.").replace(".mlp.lin2.", ".mlp.fc2.");
    let keep = k.starts_with("patch_embed.")
        || k == "cls_token"
        || k == "pos_embed"
        || k.starts_with("norm.")
        || (k.starts_with("blocks.") && !k.contains(".rel_pos"));
    keep.then_some(k)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConversionReport {
    pub converted: Vec<String>,
    /// Input keys with no backbone counterpart.
    pub dropped: Vec<String>,
    /// Parameters absent from the input that have a neutral value (the final
    /// norm, which segment-anything encoders replace with a neck).
    pub synthesized: Vec<String>,
}

/// Convert `input` for the backbone described by `spec` and write it to `output`.
pub fn convert_weights(input: &Path, spec: &BackboneSpec, output: &Path) -> Result<ConversionReport> {
    let arrays = read_safetensors(input)?;
    let mut spec = spec.clone();
    spec.pretrained_source = None;
    let store = ParamStore::shape_only();
    Backbone::new(&spec, &store.root(ParamGroup::Backbone).pp("backbone"))?;
    let expected: BTreeMap<String, Vec<usize>> = store
        .params()
        .into_iter()
        .map(|e| (e.name["backbone.".len()..].to_string(), e.tensor.dims().to_vec()))
        .collect();

    let mut report = ConversionReport::default();
    let mut na = NamedArrays::new();
    for (key, t) in arrays {
        match map_key(&key).filter(|k| expected.contains_key(k)) {
            Some(name) => {
                let want = &expected[&name];
                if t.dims() != want.as_slice() {
                    return Err(Error::WeightShape {
                        name: key,
                        expected: want.clone(),
                        found: t.dims().to_vec(),
                    });
                }
                report.converted.push(name.clone());
                na.insert(name, t);
            }
            None => report.dropped.push(key),
        }
    }
    for (name, shape) in &expected {
        if na.get(name).is_some() {
            continue;
        }
        let neutral = match name.as_str() {
            "norm.weight" => Tensor::ones(shape.as_slice(), DType::F32, &Device::Cpu)?,
            "norm.bias" => Tensor::zeros(shape.as_slice(), DType::F32, &Device::Cpu)?,
            _ => return Err(Error::MissingWeight(name.clone())),
        };
        report.synthesized.push(name.clone());
        na.insert(name.clone(), neutral);
    }
    na.set_field("kind", json!("weights"));
    na.set_field("family", json!(spec.family.to_string()));
    na.set_field("size", json!(spec.size.to_string()));
    na.set_field("source", json!(input.file_name().map(|f| f.to_string_lossy().into_owned())));
    container::save(output, &na)?;
    Ok(report)
}
