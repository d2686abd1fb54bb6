//! Versioned binary checkpoints of named tensors.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a
//! little-endian u64 header length, a JSON header describing every tensor
//! (name, shape, element offset, element count) plus free-form string
//! metadata, then one flat little-endian f64 payload. Tensors round-trip by
//! name, so loading checks names and shapes rather than trusting order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HSTUCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, String>,
}

/// A loaded checkpoint: owned tensor buffers plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, v)| (s.as_slice(), v.as_slice()))
    }
}

/// Writes tensors and metadata to `path`.
pub fn save(
    path: &Path,
    tensors: &[(String, Vec<usize>, &[f64])],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, shape, values) in tensors {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Format(format!(
                "tensor {name}: shape {shape:?} does not describe {} values",
                values.len()
            )));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len(),
        });
        offset += values.len();
    }
    let header = serde_json::to_vec(&Header { tensors: entries, meta: meta.clone() })?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, _, values) in tensors {
        for v in *values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole checkpoint back.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|_| truncated())?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(|_| truncated())?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(|_| truncated())?;
    let header: Header =
        serde_json::from_slice(&hbuf).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    let mut payload = vec![0u8; total * 8];
    r.read_exact(&mut payload).map_err(|_| truncated())?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        if t.offset + t.len > values.len() || t.shape.iter().product::<usize>() != t.len {
            return Err(Error::Format(format!("tensor {} has inconsistent bounds", t.name)));
        }
        tensors.push((t.name, t.shape, values[t.offset..t.offset + t.len].to_vec()));
    }
    Ok(Checkpoint { tensors, meta: header.meta })
}

/// Copies a loaded checkpoint into live tensors, matching by name and
/// requiring identical shapes and an exact one-to-one cover.
pub fn restore_into(
    ckpt: &Checkpoint,
    targets: Vec<(String, Vec<usize>, &mut [f64])>,
) -> Result<()> {
    if ckpt.tensors.len() != targets.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            ckpt.tensors.len(),
            targets.len()
        )));
    }
    for (name, shape, buf) in targets {
        let (cshape, cvals) = ckpt
            .tensor(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if cshape != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {name}: checkpoint shape {cshape:?} vs model shape {shape:?}"
            )));
        }
        buf.copy_from_slice(cvals);
    }
    Ok(())
}

fn truncated() -> Error {
    Error::Format("checkpoint file is truncated".into())
}
