//! Single-file tensor archives: a name -> dense `f32` array map plus a
//! string metadata record, stored in the safetensors container format.
//!
//! Both teacher weights and student checkpoints use this container. Any
//! safetensors file with `F32`/`F64` tensors can be read; files written here
//! always use little-endian `F32` and round-trip bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "tensor of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, ArchiveTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Load(format!("archive metadata lacks `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(&String, &ArchiveTensor, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(name, t)| (name, t, t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = buffers
            .iter()
            .map(|(name, t, bytes)| {
                TensorView::new(Dtype::F32, t.shape.clone(), bytes)
                    .map(|view| (name.as_str(), view))
                    .map_err(|e| Error::Load(format!("tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Load(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parsed = SafeTensors::deserialize(bytes).map_err(|e| match diagnose(bytes) {
            Some(name) => Error::Load(format!("tensor `{name}` is truncated or corrupt ({e})")),
            None => Error::Load(e.to_string()),
        })?;
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Load(e.to_string()))?;
        let metadata = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        let mut tensors = BTreeMap::new();
        for (name, view) in parsed.tensors() {
            let data = decode(&name, &view)?;
            tensors.insert(
                name,
                ArchiveTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 over tensor names, shapes and values (metadata excluded).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.tensors {
            hash_tensor(&mut hasher, name, &t.shape, &t.data);
        }
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn hash_tensor(hasher: &mut Sha256, name: &str, shape: &[usize], data: &[f32]) {
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update((shape.len() as u64).to_le_bytes());
    for d in shape {
        hasher.update((*d as u64).to_le_bytes());
    }
    for v in data {
        hasher.update(v.to_le_bytes());
    }
}

fn decode(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()),
        Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")) as f32)
            .collect()),
        // batch-norm step counters carried by torch exports; never used
        Dtype::I64 if name.ends_with("num_batches_tracked") => Ok(Vec::new()),
        other => Err(Error::Load(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    }
}

#[derive(Deserialize)]
struct RawInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// Names the first tensor whose declared extent disagrees with its shape or
/// runs past the end of the file.
fn diagnose(bytes: &[u8]) -> Option<String> {
    let n = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
    let header = std::str::from_utf8(bytes.get(8..8usize.checked_add(n)?)?).ok()?;
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(header).ok()?;
    let data_len = bytes.len() - 8 - n;
    let mut infos: Vec<(String, RawInfo)> = raw
        .into_iter()
        .filter(|(k, _)| k != "__metadata__")
        .filter_map(|(k, v)| serde_json::from_value::<RawInfo>(v).ok().map(|info| (k, info)))
        .collect();
    infos.sort_by_key(|(_, info)| info.data_offsets);
    infos.into_iter().find_map(|(name, info)| {
        let width = match info.dtype.as_str() {
            "F64" | "I64" | "U64" => 8,
            "F32" | "I32" | "U32" => 4,
            "F16" | "BF16" | "I16" | "U16" => 2,
            _ => 1,
        };
        let expected = info.shape.iter().product::<usize>() * width;
        let (start, end) = info.data_offsets;
        (end < start || end - start != expected || end > data_len).then_some(name)
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::default();
        a.insert("a.weight", ArchiveTensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        a.insert("b.bias", ArchiveTensor::new(vec![4], vec![0.5; 4]).unwrap());
        a.metadata.insert("k".into(), "v".into());
        a
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = TensorArchive::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("b.bias"), "{err}");
    }

    #[test]
    fn fingerprint_ignores_metadata() {
        let a = sample();
        let mut b = sample();
        b.metadata.insert("other".into(), "x".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.tensors.get_mut("b.bias").unwrap().data[0] = 0.25;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            values in proptest::collection::vec(any::<f32>(), 1..64),
            key in "[a-z]{1,8}",
            meta in "[ -~]{0,20}",
        ) {
            let mut a = TensorArchive::default();
            a.insert(key.clone(), ArchiveTensor::new(vec![values.len()], values.clone()).unwrap());
            a.metadata.insert("note".into(), meta);
            let back = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
            let got = &back.get(&key).unwrap().data;
            prop_assert_eq!(got.len(), values.len());
            for (x, y) in got.iter().zip(&values) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back.metadata, a.metadata);
        }
    }
}
