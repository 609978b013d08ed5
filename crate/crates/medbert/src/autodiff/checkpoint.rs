//! Checkpoint file format.
//!
//! Layout: the ASCII magic `MBCKPT1\n`, an 8-byte little-endian header
//! length, a JSON header (dtype, step counter, parameter manifest in
//! store order, arbitrary `extra` metadata such as a model config),
//! then the raw little-endian value blobs for each parameter in
//! manifest order, followed by the first- and second-moment blobs in
//! the same order. Identical stores serialize to identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MBCKPT1\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: u64,
    params: Vec<ParamEntry>,
    extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn dtype_name<S: Scalar>() -> &'static str {
    if std::mem::size_of::<S>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn write_blob<S: Scalar>(out: &mut Vec<u8>, data: &[S]) {
    if dtype_name::<S>() == "f32" {
        for v in data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    } else {
        for v in data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn read_blob<S: Scalar>(bytes: &[u8], offset: &mut usize, n: usize) -> Result<Vec<S>> {
    let width = std::mem::size_of::<S>();
    let end = *offset + n * width;
    if end > bytes.len() {
        return Err(Error::Contract("checkpoint truncated".into()));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let chunk = &bytes[*offset + i * width..*offset + (i + 1) * width];
        let v = if width == 4 {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(chunk.try_into().unwrap())
        };
        data.push(S::of_f64(v));
    }
    *offset = end;
    Ok(data)
}

/// Serialize a store (values, moments, step) plus caller metadata.
pub fn save_checkpoint<S: Scalar>(
    store: &ParameterStore<S>,
    extra: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let header = Header {
        dtype: dtype_name::<S>().to_string(),
        step: store.step,
        params: store
            .names()
            .iter()
            .map(|n| ParamEntry {
                name: n.clone(),
                shape: store.get(n).shape.clone(),
            })
            .collect(),
        extra,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for name in store.names() {
        write_blob(&mut out, &store.get(name).data);
    }
    for name in store.names() {
        let (m, _) = store.moments(name);
        write_blob(&mut out, m);
    }
    for name in store.names() {
        let (_, v) = store.moments(name);
        write_blob(&mut out, v);
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a checkpoint saved with the same scalar type; returns the store
/// and the caller metadata.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ParameterStore<S>, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Contract(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: Header =
        serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
    if header.dtype != dtype_name::<S>() {
        return Err(Error::config(
            "dtype",
            format!("checkpoint is {}, requested {}", header.dtype, dtype_name::<S>()),
        ));
    }
    let mut offset = 16 + header_len;
    let mut store = ParameterStore::<S>::new();
    store.step = header.step;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let data = read_blob::<S>(&bytes, &mut offset, n)?;
        store.add(&entry.name, Tensor::new(entry.shape.clone(), data));
    }
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let m = read_blob::<S>(&bytes, &mut offset, n)?;
        let v_offset_store = m;
        // second-moment blobs come after all first-moment blobs, so
        // stash m and read v in a second pass below
        store.set_moments(&entry.name, v_offset_store, vec![S::zero(); n]);
    }
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let v = read_blob::<S>(&bytes, &mut offset, n)?;
        let (m, _) = store.moments(&entry.name);
        let m = m.to_vec();
        store.set_moments(&entry.name, m, v);
    }
    Ok((store, header.extra))
}
