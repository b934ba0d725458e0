//! Checkpoint file format.
//!
//! Layout: magic `TFCP`, version u32, count u32, then per tensor:
//! name length u32 + UTF-8 name, rank u32, extents u32[], payload of 32-bit
//! IEEE-754 little-endian floats. Round-trips are bit-exact.

use super::{ParamStore, Tensor};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TFCP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("invalid field: {0}")]
    BadValue(String),
    #[error("checkpoint entry {name:?} does not match store (expected shape {expected:?}, file has {got:?})")]
    EntryMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint entry {0:?} not present in parameter store")]
    UnknownEntry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), FormatError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| FormatError::Truncated(what.to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<(), FormatError> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>, FormatError> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|_| FormatError::Truncated(what.to_string()))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes named tensors in the given order.
pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, t) in tensors {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u32(&mut w, d as u32)?;
        }
        write_f32s(&mut w, t.data())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads all tensors from a checkpoint file.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| FormatError::Truncated("magic".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let count = read_u32(&mut r, "count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| FormatError::Truncated(format!("name of tensor {i}")))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| FormatError::BadValue(format!("tensor {i} name is not UTF-8")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = read_u32(&mut r, "extent")? as usize;
            if d == 0 {
                return Err(FormatError::BadValue(format!("zero extent in {name:?}")));
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let data = read_f32s(&mut r, n, &format!("payload of {name:?}"))?;
        out.push((name.clone(), Tensor::new(shape, data).expect("validated shape")));
    }
    Ok(out)
}

/// Saves every parameter in the store, insertion order.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), FormatError> {
    save_tensors(path, &store.snapshot())
}

/// Loads a checkpoint into matching store entries. Entries present in the
/// file but absent from the store (or shape mismatches) are errors; store
/// entries missing from the file are left untouched. Returns the number of
/// parameters loaded.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<usize, FormatError> {
    let tensors = load_tensors(path)?;
    let mut loaded = 0usize;
    for (name, t) in tensors {
        match store.find(&name) {
            Some(pid) => {
                if store.value(pid).shape() != t.shape() {
                    return Err(FormatError::EntryMismatch {
                        name,
                        expected: store.value(pid).shape().to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
                store.set_value(pid, t).expect("shape checked");
                loaded += 1;
            }
            None => return Err(FormatError::UnknownEntry(name)),
        }
    }
    Ok(loaded)
}
