//! The ".ten" tensor container: magic `SNTL`, format version u8, rank u8,
//! extents as little-endian u32 each, then the raw little-endian f32
//! payload. Round trips are bit-exact.

use std::path::Path;

use super::Tensor;
use crate::container::{atomic_write, put_u32, FileError, Reader};

const MAGIC: &[u8; 4] = b"SNTL";
const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        put_u32(&mut out, e as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FileError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(FileError::BadMagic { expected: "SNTL" });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(FileError::UnsupportedVersion { expected: VERSION, got: version });
    }
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let payload = r.take(4 * n)?;
    if r.remaining() != 0 {
        return Err(FileError::Metadata(format!("{} trailing bytes", r.remaining())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| FileError::Metadata(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), FileError> {
    atomic_write(path, &encode(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, FileError> {
    decode(&std::fs::read(path)?)
}
