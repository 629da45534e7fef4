//! Single-file archive: magic, `u64` LE manifest length, JSON manifest, then
//! raw little-endian `f32` tensor data addressed by the manifest index.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSDCCL\x00\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Writes `meta` and `tensors` to `path` through a sibling temp file.
pub fn save(path: &Path, meta: &impl Serialize, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset,
        });
        offset += t.elem_count();
    }
    let manifest = serde_json::to_vec(&Manifest {
        meta: serde_json::to_value(meta)?,
        tensors: entries,
    })?;

    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(&manifest)?;
        for (_, t) in tensors {
            let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loaded archive: the manifest's metadata and `f32` tensors on the CPU.
pub struct Loaded {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Loaded {
    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut manifest = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut manifest)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated manifest", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&manifest)?;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: data section is not whole f32s",
            path.display()
        )));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let slice = floats.get(e.offset..e.offset + n).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{}` runs past the data section", e.name))
        })?;
        tensors.push((
            e.name.clone(),
            Tensor::from_slice(slice, e.shape.as_slice(), &Device::Cpu)?,
        ));
    }
    Ok(Loaded {
        meta: manifest.meta,
        tensors,
    })
}
