//! Binary parameter snapshots.
//!
//! Layout (little endian): the 8-byte magic, a `u32` tensor count, then per
//! tensor a `u32` name length, the UTF-8 name, a `u32` rank, `rank` `u32`
//! dimensions and the values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{NnError, ParamStore, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NNMC0001";

// Guards against allocating absurd buffers from a corrupt header.
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_ELEMS: usize = 1 << 28;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| NnError::Checkpoint(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Parses every tensor in a checkpoint stream.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| NnError::Checkpoint("missing header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        if nlen > MAX_NAME {
            return Err(NnError::Checkpoint(format!("name length {nlen}")));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)
            .map_err(|e| NnError::Checkpoint(format!("truncated: {e}")))?;
        let name =
            String::from_utf8(name).map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > MAX_RANK {
            return Err(NnError::Checkpoint(format!("rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| NnError::Checkpoint(format!("shape {shape:?} for {name}")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| NnError::Checkpoint(format!("truncated: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

/// Loads values into an existing store. Every parameter of the store must be
/// present with the same shape; extra entries in the file are an error too.
pub fn load_checkpoint(path: impl AsRef<Path>, params: &mut ParamStore) -> Result<()> {
    let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
    if entries.len() != params.len() {
        return Err(NnError::Checkpoint(format!(
            "{} tensors in file, model has {}",
            entries.len(),
            params.len()
        )));
    }
    for (name, t) in entries {
        let id = params
            .find(&name)
            .ok_or_else(|| NnError::Checkpoint(format!("unknown parameter {name}")))?;
        if params.get(id).shape() != t.shape() {
            return Err(NnError::Checkpoint(format!(
                "{name}: shape {:?} in file, {:?} in model",
                t.shape(),
                params.get(id).shape()
            )));
        }
        params.set(id, t.data())?;
    }
    Ok(())
}
