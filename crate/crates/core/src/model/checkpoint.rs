//! Flat binary parameter container.
//!
//! Layout: magic `MFLT1`, float width (bytes, u8), entry count (u32 LE);
//! then per entry: name length (u16 LE), name bytes, rank (u8), extents
//! (u32 LE each), raw little-endian values. Round-trips byte-exactly.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamSet, Scalar};

pub const MAGIC: &[u8; 5] = b"MFLT1";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("checkpoint stores {found}-byte floats, this build expects {expected}-byte")]
    WidthMismatch { found: u8, expected: u8 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
}

pub fn to_bytes<S: Scalar>(params: &ParamSet<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(S::WIDTH);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for entry in params.entries() {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(entry.shape.len() as u8);
        for &extent in &entry.shape {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in &entry.values {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<ParamSet<S>, CheckpointError> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], CheckpointError> {
        if cursor.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };

    if take(5, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let width = take(1, "float width")?[0];
    if width != S::WIDTH {
        return Err(CheckpointError::WidthMismatch { found: width, expected: S::WIDTH });
    }
    let count = u32::from_le_bytes(take(4, "entry count")?.try_into().unwrap());

    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("utf-8 name"))?;
        let rank = take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4, "extent")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * S::WIDTH as usize, "values")?;
        let values = raw
            .chunks_exact(S::WIDTH as usize)
            .map(S::read_le)
            .collect();
        params.push(name, shape, values);
    }
    Ok(params)
}

pub fn save<S: Scalar>(params: &ParamSet<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParamSet<S>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
