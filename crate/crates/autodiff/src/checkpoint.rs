//! Flat binary container of named arrays.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes  "LOBFCKPT"
//! version u32      = 1
//! count   u32      number of arrays
//! repeated `count` times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (u64 × rank)
//!   data     f64 × product(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LOBFCKPT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), store)
}

pub fn load(path: &Path) -> Result<ParamStore> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Copies values from `loaded` into `target`, matching by name and shape.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(NnError::Format(format!(
            "checkpoint has {} arrays, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let src = loaded
            .find(&name)
            .ok_or_else(|| NnError::Format(format!("missing array {name}")))?;
        let src = loaded.get(src);
        if src.shape() != target.get(id).shape() {
            return Err(NnError::Format(format!("shape mismatch for {name}")));
        }
        *target.get_mut(id) = src.clone();
    }
    Ok(())
}
