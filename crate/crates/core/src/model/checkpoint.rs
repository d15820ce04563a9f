//! Binary checkpoint: magic `ATWM`, u32 version, u64 header length, a JSON
//! header with the config and tensor index, then little-endian f32 data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATWM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    if let Some((name, _)) = model.params.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
    }
    let mut offset = 0u64;
    let tensors = model
        .params
        .iter()
        .map(|(name, t)| {
            let e = IndexEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in model.params.iter() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    if take(&mut buf, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(take(&mut buf, 8, "header length")?.try_into().unwrap());
    let header_len = usize::try_from(header_len)
        .map_err(|_| Error::Checkpoint(format!("header length {header_len} too large")))?;
    let header: Header = serde_json::from_slice(take(&mut buf, header_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;
    let data = buf;
    let mut tensors = BTreeMap::new();
    let mut expected_end = 0usize;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > data.len() {
            return Err(Error::Checkpoint(format!("truncated file: tensor {} runs past the end", e.name)));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {}", e.name)));
        }
        expected_end = expected_end.max(end);
    }
    if expected_end != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            data.len() - expected_end
        )));
    }
    let params = ModelParams::from_tensors(&header.config, tensors)?;
    Ok(Model {
        config: header.config,
        params,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_checkpoint(model, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(std::fs::File::open(path)?)
}
