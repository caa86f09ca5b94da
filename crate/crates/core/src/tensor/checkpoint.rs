//! Binary checkpoint format.
//!
//! Little-endian throughout: the magic `BPN1`, then one record per
//! parameter in store order — name length (u32) + UTF-8 name, rank (u32),
//! dims (u32 each), f32 values, f32 momentum buffer. The reader rejects any
//! other magic and validates names and shapes against the receiving store.

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BPN1";

pub fn save_checkpoint<F: Scalar, W: Write>(store: &ParamStore<F>, out: &mut W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(p.dims.len() as u32).to_le_bytes())?;
        for d in &p.dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &p.values {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
        for v in &p.momentum {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    match r.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Checkpoint("truncated value block".into()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Loads a checkpoint into an existing store. Every record must match a
/// parameter by name and dims, and every parameter must be covered.
pub fn load_checkpoint<F: Scalar, R: Read>(store: &mut ParamStore<F>, input: &mut R) -> Result<()> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "unknown magic {:?} (expected {:?})",
            magic, CHECKPOINT_MAGIC
        )));
    }

    let mut seen = vec![false; store.len()];
    while let Some(name_len) = read_u32(input)? {
        let mut name_bytes = vec![0u8; name_len as usize];
        input
            .read_exact(&mut name_bytes)
            .map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(input)?
            .ok_or_else(|| Error::Checkpoint(format!("{name}: truncated rank")))?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(read_u32(input)?.ok_or_else(|| {
                Error::Checkpoint(format!("{name}: truncated dims"))
            })? as usize);
        }
        let count: usize = dims.iter().product();
        let values = read_f32s(input, count)?;
        let momentum = read_f32s(input, count)?;

        let id = store
            .by_name(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = store.get_mut(id);
        if p.dims != dims {
            return Err(Error::ParamShape {
                name,
                expected: p.dims.clone(),
                actual: dims,
            });
        }
        p.values = values.into_iter().map(|v| F::from_f64(v as f64)).collect();
        p.momentum = momentum.into_iter().map(|v| F::from_f64(v as f64)).collect();
        seen[id.0] = true;
    }

    if let Some(missing) = store.iter().zip(&seen).find(|(_, s)| !**s) {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing parameter {}",
            missing.0.name
        )));
    }
    Ok(())
}

pub fn save_checkpoint_file<F: Scalar>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_checkpoint(store, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint_file<F: Scalar>(store: &mut ParamStore<F>, path: &Path) -> Result<()> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_checkpoint(store, &mut f)
}
