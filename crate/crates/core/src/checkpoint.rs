//! Parameter checkpoints: named tensor blocks in the same little-endian
//! framing style as scan files. Layout: magic "HLLC", format version u32,
//! block count u32, then per block: name length u32 + UTF-8 name, rank
//! u32, dims as u64s, and the values as f64s.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::scanio::Cursor;
use crate::tensor::TensorBase;

pub const CKPT_MAGIC: [u8; 4] = *b"HLLC";
pub const CKPT_VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar>(path: &Path, store: &ParamStore<S>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&(*v).to_f64().to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads every named block. Header and per-block framing errors carry the
/// byte offset of the defect.
pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Vec<(String, TensorBase<S>)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor { buf: &buf, pos: 0, path: path.display().to_string() };
    let magic = cur.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(cur.corrupt(0, format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}")));
    }
    let version = cur.u32("format version")?;
    if version != CKPT_VERSION {
        return Err(cur.corrupt(4, format!("unsupported version {version}, expected {CKPT_VERSION}")));
    }
    let count = cur.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count);
    for bi in 0..count {
        let name_pos = cur.pos as u64;
        let name_len = cur.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(cur.corrupt(name_pos, format!("implausible name length {name_len} in block {bi}")));
        }
        let name_bytes = cur.take(name_len, "block name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| cur.corrupt(name_pos + 4, format!("block {bi} name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        if rank > 8 {
            return Err(cur.corrupt((cur.pos - 4) as u64, format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = cur.u64("dimension")? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel.saturating_mul(8) > buf.len() {
            return Err(cur.corrupt(
                cur.pos as u64,
                format!("block {name} claims {numel} values, beyond the file size"),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(S::from_f64(cur.f64("value")?));
        }
        blocks.push((name, TensorBase::new(shape, data)?));
    }
    if cur.pos != buf.len() {
        return Err(cur.corrupt(cur.pos as u64, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(blocks)
}

/// Loads a checkpoint into an existing store; the stored layout must match
/// the store exactly (same count, names, order, and shapes).
pub fn load_checkpoint<S: Scalar>(path: &Path, store: &mut ParamStore<S>) -> Result<()> {
    let blocks = read_checkpoint::<S>(path)?;
    if blocks.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameter blocks, model expects {}",
            blocks.len(),
            store.len()
        )));
    }
    for (id, (name, tensor)) in store.ids().zip(blocks.iter()) {
        if store.name(id) != name {
            return Err(Error::Config(format!(
                "checkpoint block '{name}' does not match model parameter '{}'",
                store.name(id)
            )));
        }
        if store.get(id).shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "checkpoint block '{name}' has shape {:?}, model expects {:?}",
                tensor.shape(),
                store.get(id).shape()
            )));
        }
    }
    for (id, (_, tensor)) in store.ids().zip(blocks) {
        *store.get_mut(id) = tensor;
    }
    Ok(())
}
