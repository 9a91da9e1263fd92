//! Single-file named-array container.
//!
//! Arrays are stored in the safetensors layout. The header metadata carries a
//! single `manifest` entry holding canonical (key-sorted) JSON with the list
//! of `(name, shape, dtype, sha256)` records plus caller-provided fields, so
//! writing the same content twice yields byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MANIFEST_KEY: &str = "manifest";

/// Arrays keyed by name plus free-form manifest fields.
#[derive(Debug, Clone, Default)]
pub struct NamedArrays {
    pub arrays: BTreeMap<String, Tensor>,
    pub fields: BTreeMap<String, Value>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.insert(name.into(), t);
    }

    pub fn set_field(&mut self, key: impl Into<String>, v: Value) {
        self.fields.insert(key.into(), v);
    }

    pub fn field(&self, key: &str) -> Option<&Value> {
        self.fields.get(key)
    }

    pub fn field_str(&self, key: &str) -> Option<&str> {
        self.fields.get(key).and_then(Value::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }
}

fn st_dtype(d: DType) -> Result<StDtype> {
    Ok(match d {
        DType::F32 => StDtype::F32,
        DType::F64 => StDtype::F64,
        DType::F16 => StDtype::F16,
        DType::BF16 => StDtype::BF16,
        DType::U8 => StDtype::U8,
        DType::U32 => StDtype::U32,
        DType::I64 => StDtype::I64,
        other => return Err(Error::Data(format!("unsupported dtype {other:?} in container"))),
    })
}

fn dtype_from_str(s: &str) -> Option<DType> {
    Some(match s {
        "F32" => DType::F32,
        "F64" => DType::F64,
        "F16" => DType::F16,
        "BF16" => DType::BF16,
        "U8" => DType::U8,
        "U32" => DType::U32,
        "I64" => DType::I64,
        _ => return None,
    })
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let t = t.flatten_all()?;
    let bytes = match t.dtype() {
        DType::F32 => t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => t.to_vec1::<u8>()?,
        DType::U32 => t.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => t.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F16 => t
            .to_vec1::<half::f16>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        DType::BF16 => t
            .to_vec1::<half::bf16>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        other => return Err(Error::Data(format!("unsupported dtype {other:?} in container"))),
    };
    Ok(bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialize to bytes.
pub fn to_bytes(na: &NamedArrays) -> Result<Vec<u8>> {
    let mut raw: Vec<(String, Vec<u8>, Vec<usize>, StDtype)> = Vec::with_capacity(na.arrays.len());
    let mut records = Vec::with_capacity(na.arrays.len());
    for (name, t) in &na.arrays {
        let bytes = tensor_bytes(t)?;
        let dt = st_dtype(t.dtype())?;
        records.push(json!({
            "name": name,
            "shape": t.dims(),
            "dtype": format!("{dt:?}"),
            "sha256": sha256_hex(&bytes),
        }));
        raw.push((name.clone(), bytes, t.dims().to_vec(), dt));
    }
    let mut manifest = Map::new();
    for (k, v) in &na.fields {
        manifest.insert(k.clone(), v.clone());
    }
    manifest.insert("arrays".into(), Value::Array(records));
    let manifest = serde_json::to_string(&Value::Object(manifest))?;

    let views = raw
        .iter()
        .map(|(name, bytes, shape, dt)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Data(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = std::collections::HashMap::new();
    meta.insert(MANIFEST_KEY.to_string(), manifest);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::Data(e.to_string()))
}

pub fn save(path: &Path, na: &NamedArrays) -> Result<()> {
    let bytes = to_bytes(na)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NamedArrays> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Parse a container, verifying every array's extent and checksum in file order.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<NamedArrays> {
    let corrupt = |array: &str, reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        array: array.to_string(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(corrupt("<header>", format!("file is {} bytes", bytes.len())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if 8 + n > bytes.len() {
        return Err(corrupt(
            "<header>",
            format!("header needs {} bytes, file has {}", 8 + n, bytes.len()),
        ));
    }
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..8 + n])
        .map_err(|e| corrupt("<header>", e.to_string()))?;
    let data = &bytes[8 + n..];

    let mut fields = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    if let Some(m) = header
        .get("__metadata__")
        .and_then(|m| m.get(MANIFEST_KEY))
        .and_then(Value::as_str)
    {
        let manifest: Map<String, Value> =
            serde_json::from_str(m).map_err(|e| corrupt("<manifest>", e.to_string()))?;
        for (k, v) in manifest {
            if k == "arrays" {
                for rec in v.as_array().into_iter().flatten() {
                    if let (Some(name), Some(sum)) = (
                        rec.get("name").and_then(Value::as_str),
                        rec.get("sha256").and_then(Value::as_str),
                    ) {
                        checksums.insert(name.to_string(), sum.to_string());
                    }
                }
            } else {
                fields.insert(k, v);
            }
        }
    }

    let mut entries = Vec::new();
    for (name, info) in &header {
        if name == "__metadata__" {
            continue;
        }
        let dtype = info
            .get("dtype")
            .and_then(Value::as_str)
            .and_then(dtype_from_str)
            .ok_or_else(|| corrupt(name, "unknown dtype".into()))?;
        let shape: Vec<usize> = info
            .get("shape")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).map(|v| v as usize).collect())
            .ok_or_else(|| corrupt(name, "missing shape".into()))?;
        let offs: Vec<usize> = info
            .get("data_offsets")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_u64).map(|v| v as usize).collect())
            .filter(|o: &Vec<usize>| o.len() == 2)
            .ok_or_else(|| corrupt(name, "missing data offsets".into()))?;
        entries.push((offs[0], offs[1], name.clone(), dtype, shape));
    }
    entries.sort_by_key(|e| (e.0, e.1));

    let mut arrays = BTreeMap::new();
    for (start, end, name, dtype, shape) in entries {
        if end < start || end > data.len() {
            return Err(corrupt(
                &name,
                format!("truncated: data ends at byte {end}, only {} available", data.len()),
            ));
        }
        let slice = &data[start..end];
        let expected = shape.iter().product::<usize>() * dtype.size_in_bytes();
        if slice.len() != expected {
            return Err(corrupt(&name, format!("{} bytes for shape {shape:?}", slice.len())));
        }
        if let Some(sum) = checksums.get(&name) {
            if &sha256_hex(slice) != sum {
                return Err(corrupt(&name, "checksum mismatch".into()));
            }
        }
        let t = Tensor::from_raw_buffer(slice, dtype, &shape, &Device::Cpu)?;
        arrays.insert(name, t);
    }
    Ok(NamedArrays { arrays, fields })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedArrays {
        let mut na = NamedArrays::new();
        na.insert("b.w", Tensor::arange(0f32, 12.0, &Device::Cpu).unwrap().reshape((3, 4)).unwrap());
        na.insert("a.mask", Tensor::new(&[1u8, 2, 3], &Device::Cpu).unwrap());
        na.set_field("decoder_kind", json!("linear"));
        na.set_field("epoch", json!(3));
        na
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.safetensors");
        let p2 = dir.path().join("b.safetensors");
        save(&p1, &sample()).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.field_str("decoder_kind"), Some("linear"));
        assert_eq!(loaded.get("b.w").unwrap().dims(), &[3, 4]);
        save(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_names_first_bad_array() {
        let bytes = to_bytes(&sample()).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let cut = &bytes[..8 + header_len + 10];
        match from_bytes(cut, Path::new("x")).unwrap_err() {
            Error::Corrupt { array, .. } => assert_eq!(array, "b.w"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = to_bytes(&sample()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(from_bytes(&bytes, Path::new("x")), Err(Error::Corrupt { .. })));
    }
}
