//! Shared plumbing for the binary artifact formats (.ten, .ckpt, .det):
//! little-endian primitives, a CRC-32 for payload integrity, and atomic
//! file writes (temp + rename in the target directory).

use std::fmt;
use std::io;
use std::path::Path;

#[derive(Debug)]
pub enum FileError {
    Io(io::Error),
    BadMagic { expected: &'static str },
    UnsupportedVersion { expected: u8, got: u8 },
    Truncated,
    ChecksumMismatch { expected: u32, got: u32 },
    Metadata(String),
    /// Loading an artifact whose descriptor does not match the consumer.
    Mismatch(String),
    /// Refusing to overwrite an existing artifact (outputs are write-once).
    AlreadyExists(String),
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::BadMagic { expected } => write!(f, "bad magic, expected {expected:?}"),
            Self::UnsupportedVersion { expected, got } => {
                write!(f, "unsupported format version {got} (expected {expected})")
            }
            Self::Truncated => write!(f, "file truncated"),
            Self::ChecksumMismatch { expected, got } => {
                write!(f, "payload digest mismatch: stored {expected:#010x}, computed {got:#010x}")
            }
            Self::Metadata(msg) => write!(f, "invalid metadata: {msg}"),
            Self::Mismatch(msg) => write!(f, "{msg}"),
            Self::AlreadyExists(p) => write!(f, "artifact already exists: {p}"),
        }
    }
}

impl std::error::Error for FileError {}

impl From<io::Error> for FileError {
    fn from(e: io::Error) -> Self {
        FileError::Io(e)
    }
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Write `bytes` to `path` via a temp file in the same directory and an
/// atomic rename. Fails if `path` already exists.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), FileError> {
    if path.exists() {
        return Err(FileError::AlreadyExists(path.display().to_string()));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ── Cursor-style reader over a byte slice ────────────────────────────

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FileError> {
        if self.remaining() < n {
            return Err(FileError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FileError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FileError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32, FileError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
