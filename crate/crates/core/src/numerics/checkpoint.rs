//! Checkpoint files: one line of UTF-8 JSON manifest, a newline, then a
//! blob of little-endian values. Manifest offsets are relative to the first
//! byte after the newline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::fsutil;

pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub dtype: String,
    /// Owner-defined configuration (model or classifier settings).
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode<T: Scalar>(store: &ParamStore<T>, config: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        let offset = blob.len();
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            nbytes: blob.len() - offset,
            trainable: p.requires_grad,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION.to_string(),
        dtype: T::DTYPE.to_string(),
        config,
        tensors,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {:?}", manifest.version)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype {} cannot be read as {}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let blob = &bytes[split + 1..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel * T::BYTES || e.offset + e.nbytes > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {} has an invalid extent", e.name)));
        }
        let data = blob[e.offset..e.offset + e.nbytes]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, config: serde_json::Value) -> Result<()> {
    fsutil::write_atomic(path, &encode(store, config)?)
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&fsutil::read(path)?)
}

/// Copies checkpoint values into a store whose names and shapes must match.
pub fn restore_into<T: Scalar>(store: &mut ParamStore<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    for (name, t) in &ckpt.tensors {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Shape {
                op: "restore",
                lhs: p.value.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        p.value = t.clone();
    }
    if ckpt.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            ckpt.tensors.len(),
            store.len()
        )));
    }
    Ok(())
}
