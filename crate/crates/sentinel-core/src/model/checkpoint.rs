//! The ".ckpt" container: magic `SNTLCKPT`, version u8, a JSON metadata
//! block (architecture descriptor, tap manifest, seed, training history
//! summary), named ".ten" tensor sections, and a CRC-32 over the payload.
//! Round trips are byte-exact; any flipped payload byte fails the digest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{atomic_write, crc32, put_u16, put_u32, FileError, Reader};
use crate::model::{SmallCnn, TapPoint};
use crate::tensor::io as ten_io;

const MAGIC: &[u8; 8] = b"SNTLCKPT";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub tap_manifest: Vec<TapPoint>,
    pub num_classes: usize,
    pub input_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub final_val_accuracy: f64,
    /// Input pixels are scaled to [0,1]; no mean/std standardization.
    pub normalization: String,
    pub config_digest: String,
}

pub fn encode(model: &SmallCnn, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    let mut payload = Vec::new();
    put_u32(&mut payload, meta_json.len() as u32);
    payload.extend_from_slice(&meta_json);
    put_u32(&mut payload, model.params().len() as u32);
    for (name, tensor) in model.param_names().iter().zip(model.params()) {
        put_u16(&mut payload, name.len() as u16);
        payload.extend_from_slice(name.as_bytes());
        let bytes = ten_io::encode(tensor);
        put_u32(&mut payload, bytes.len() as u32);
        payload.extend_from_slice(&bytes);
    }

    let mut out = Vec::with_capacity(MAGIC.len() + 1 + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&payload);
    put_u32(&mut out, crc32(&payload));
    out
}

pub fn decode(bytes: &[u8]) -> Result<(SmallCnn, CheckpointMeta), FileError> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(FileError::BadMagic { expected: "SNTLCKPT" });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(FileError::UnsupportedVersion { expected: VERSION, got: version });
    }
    if bytes.len() < 13 {
        return Err(FileError::Truncated);
    }
    let payload = &bytes[9..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(payload);
    if stored != computed {
        return Err(FileError::ChecksumMismatch { expected: stored, got: computed });
    }

    let mut r = Reader::new(payload);
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| FileError::Metadata(e.to_string()))?;

    let mut model = SmallCnn::new(meta.num_classes, meta.input_size, meta.seed)
        .map_err(|e| FileError::Metadata(e.to_string()))?
        .with_taps(meta.tap_manifest.clone());
    if model.descriptor() != meta.architecture {
        return Err(FileError::Mismatch(format!(
            "architecture descriptor {:?} does not match this build ({:?})",
            meta.architecture,
            model.descriptor()
        )));
    }

    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(FileError::Metadata(format!(
            "expected {} tensor sections, found {count}",
            model.params().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for expected_name in model.param_names() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| FileError::Metadata(e.to_string()))?;
        if name != *expected_name {
            return Err(FileError::Metadata(format!(
                "tensor section {name:?} out of order, expected {expected_name:?}"
            )));
        }
        let ten_len = r.u32()? as usize;
        let tensor = ten_io::decode(r.take(ten_len)?)?;
        params.push(tensor.with_requires_grad(true));
    }
    for (expected, got) in model.params().iter().zip(&params) {
        if expected.shape() != got.shape() {
            return Err(FileError::Mismatch(format!(
                "tensor shape {:?} does not match architecture ({:?})",
                got.shape(),
                expected.shape()
            )));
        }
    }
    model.set_params(params);
    Ok((model, meta))
}

pub fn save(path: &Path, model: &SmallCnn, meta: &CheckpointMeta) -> Result<(), FileError> {
    atomic_write(path, &encode(model, meta))
}

pub fn load(path: &Path) -> Result<(SmallCnn, CheckpointMeta), FileError> {
    decode(&std::fs::read(path)?)
}
