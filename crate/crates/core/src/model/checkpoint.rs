//! `NARC` checkpoint files.
//!
//! Layout: magic `NARC`, `u32` LE version, `u64` LE length of a UTF-8 JSON
//! metadata document, the document, then every tensor as little-endian
//! `f32` in table order. The metadata holds the model configuration and a
//! tensor table of `{name, shape, offset}` where `offset` counts bytes from
//! the start of the tensor data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, Weights};
use crate::error::{truncated, Error, Result};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"NARC";
pub const VERSION: u32 = 1;
const KIND: &str = "NARC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::CorruptHeader {
        kind: KIND,
        detail: detail.into(),
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(state: &ModelState<T>, mut out: W) -> Result<()> {
    let tensors = state.weights.tensors();
    let mut offset = 0u64;
    let table = tensors
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            };
            offset += 4 * t.data.len() as u64;
            e
        })
        .collect();
    let meta = Metadata {
        config: state.config.clone(),
        tensors: table,
    };
    let doc = serde_json::to_vec(&meta).map_err(|e| Error::Input(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(doc.len() as u64)?;
    out.write_all(&doc)?;
    for t in &tensors {
        for v in t.data {
            out.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<ModelState<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated(KIND, "magic"))?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>().map_err(truncated(KIND, "version"))?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = input.read_u64::<LittleEndian>().map_err(truncated(KIND, "metadata length"))?;
    if len > 1 << 30 {
        return Err(corrupt(format!("implausible metadata length {len}")));
    }
    let mut doc = vec![0u8; len as usize];
    input.read_exact(&mut doc).map_err(truncated(KIND, "metadata"))?;
    let meta: Metadata =
        serde_json::from_slice(&doc).map_err(|e| corrupt(format!("metadata: {e}")))?;
    meta.config
        .validate()
        .map_err(|e| corrupt(format!("metadata config: {e}")))?;

    let mut weights = Weights::<T>::init(&meta.config);
    let expected: Vec<(String, Vec<usize>)> = weights
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    if expected.len() != meta.tensors.len() {
        return Err(corrupt(format!(
            "tensor table lists {} tensors, config implies {}",
            meta.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0u64;
    for ((name, shape), entry) in expected.iter().zip(&meta.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.offset != offset {
            return Err(corrupt(format!(
                "tensor table entry {} {:?} @{} does not match expected {name} {shape:?} @{offset}",
                entry.name, entry.shape, entry.offset
            )));
        }
        offset += 4 * shape.iter().product::<usize>() as u64;
    }
    for (slice, (name, _)) in weights.slices_mut().into_iter().zip(&expected) {
        for v in slice.iter_mut() {
            let x = input
                .read_f32::<LittleEndian>()
                .map_err(truncated(KIND, name.as_str()))?;
            *v = T::lit(x as f64);
        }
    }
    if !weights.all_finite() {
        return Err(Error::Input("checkpoint holds non-finite weights".into()));
    }
    Ok(ModelState::from_weights(meta.config, weights))
}

pub fn save<T: Scalar>(state: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(state, BufWriter::new(File::create(path)?))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
