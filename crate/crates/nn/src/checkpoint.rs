//! Checkpoint file: an 8-byte little-endian header length, a JSON header
//! (version, dtype, seed, tensor names and shapes, free-form metadata), then
//! the raw little-endian payload of every tensor in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes every parameter of `store`, in registration order.
pub fn write_checkpoint<F: Float, W: Write>(
    store: &ParamStore<F>,
    meta: serde_json::Value,
    mut out: W,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: F::DTYPE.to_string(),
        seed: store.seed(),
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, p) in store.iter() {
        buf.clear();
        for &x in p.value.data() {
            x.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint into named tensors of precision `F`, converting if the
/// file was written in the other precision.
pub fn read_checkpoint<F: Float, R: Read>(
    mut input: R,
) -> Result<(CheckpointHeader, Vec<(String, Tensor<F>)>)> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(NnError::Checkpoint(format!(
            "implausible header length {len}"
        )));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(NnError::Checkpoint(format!("unknown dtype `{other}`"))),
    };
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n = entry.shape[0] * entry.shape[1];
        let mut bytes = vec![0u8; n * width];
        input.read_exact(&mut bytes)?;
        let data: Vec<F> = bytes
            .chunks_exact(width)
            .map(|b| {
                if width == F::BYTES {
                    F::read_le(b)
                } else if width == 4 {
                    F::of(f32::read_le(b) as f64)
                } else {
                    F::of(f64::read_le(b))
                }
            })
            .collect();
        tensors.push((
            entry.name.clone(),
            Tensor::from_vec(entry.shape[0], entry.shape[1], data)?,
        ));
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after payload".into()));
    }
    Ok((header, tensors))
}

/// Copies tensors into an existing store by name. Every store parameter must
/// be present with a matching shape.
pub fn load_into<F: Float>(
    store: &mut ParamStore<F>,
    tensors: &[(String, Tensor<F>)],
) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store.id(name)?;
        let dst = store.value_mut(id);
        if dst.shape() != t.shape() {
            return Err(NnError::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t.clone();
    }
    Ok(())
}

pub fn save_file<F: Float>(
    store: &ParamStore<F>,
    meta: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(store, meta, std::io::BufWriter::new(f))
}

pub fn read_file<F: Float>(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor<F>)>)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
