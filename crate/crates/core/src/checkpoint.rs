//! Binary model checkpoints.
//!
//! Layout:
//!
//! ```text
//! u64 LE   header length in bytes
//! [u8]     UTF-8 JSON header {"format", "model", "tensors": [{name, shape, offset}], "meta"}
//! [f64 LE] parameter values, concatenated in header order; `offset` counts f64s
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

pub const FORMAT: &str = "ste-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, meta: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (name, t) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        model: model.spec.clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Incompatible("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, CheckpointHeader)> {
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Incompatible(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    read_exact(&mut r, &mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::Incompatible(format!("unreadable header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Incompatible(format!(
            "format `{}`, expected `{FORMAT}`",
            header.format
        )));
    }
    let mut model = Model::init(&header.model, 0)?;
    if model.store.len() != header.tensors.len() {
        return Err(Error::Incompatible(format!(
            "header lists {} tensors, model layout has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let mut expected_offset = 0;
    for (entry, (name, t)) in header.tensors.iter().zip(model.store.iter()) {
        if entry.name != name || entry.shape != t.shape() || entry.offset != expected_offset {
            return Err(Error::Incompatible(format!(
                "tensor `{}` {:?} @{} does not match layout `{name}` {:?} @{expected_offset}",
                entry.name,
                entry.shape,
                entry.offset,
                t.shape()
            )));
        }
        expected_offset += t.len();
    }
    let mut buf = [0u8; 8];
    for t in model.store.tensors_mut() {
        for v in t.data_mut() {
            read_exact(&mut r, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        t.grad = None;
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, model, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
