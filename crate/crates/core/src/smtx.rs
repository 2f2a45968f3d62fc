//! `SMTX` binary tensor files.
//!
//! Layout: magic `SMTX`, version byte, rank byte, `rank` little-endian `u64`
//! dims, then the row-major little-endian payload. Version 1 stores `f32`
//! (values are narrowed on save and widened on load). Version 2 stores `f64`
//! and is used for checkpoints, which must round-trip bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMTX";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

pub fn encode(t: &Tensor, precision: Precision) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Config(format!("rank {} too large for SMTX", t.rank())));
    }
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.push(precision.version());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match precision {
        Precision::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |detail: &str| Error::format(origin, detail);
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing SMTX magic"));
    }
    let width = match bytes[4] {
        1 => 4,
        2 => 8,
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated shape header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 6 + 8 * i;
        let raw: [u8; 8] = bytes[off..off + 8].try_into().expect("slice of 8");
        shape.push(u64::from_le_bytes(raw) as usize);
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != count * width {
        return Err(bad(&format!(
            "payload holds {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            count * width
        )));
    }
    let data = if width == 4 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    };
    Tensor::new(shape, data)
}

pub fn write(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    let bytes = encode(t, precision)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
