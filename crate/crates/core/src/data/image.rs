//! Raw image container.
//!
//! ```text
//! "CYT1"     magic
//! channels   u8
//! height     u32 LE
//! width      u32 LE
//! pixels     channels·height·width f32 LE, channel-major
//! crc32      u32 LE over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CYT1";
const HEADER: usize = 4 + 1 + 4 + 4;

/// Encodes a `C×H×W` tensor. Pixels are stored as `f32`.
pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::dim(format!("image must be C×H×W, got {:?}", t.shape())));
    };
    let c8 = u8::try_from(c).map_err(|_| Error::dim("more than 255 channels"))?;
    let mut out = Vec::with_capacity(HEADER + t.len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.push(c8);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes and validates a container; pixel values must lie in `[0, 1]`.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected CYT1"));
    }
    if bytes.len() < HEADER {
        return Err(Error::format(path, bytes.len() as u64, "truncated header"));
    }
    let c = bytes[4] as usize;
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let n = c
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(path, 4, format!("invalid extents {c}×{h}×{w}")))?;
    let expected = HEADER + n * 4 + 4;
    if bytes.len() < expected {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated: {} of {expected} bytes", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(path, expected as u64, "trailing bytes"));
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..expected - 4]);
    if stored != actual {
        return Err(Error::format(
            path,
            (expected - 4) as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in bytes[HEADER..expected - 4].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::format(
                path,
                (HEADER + 4 * i) as u64,
                format!("pixel value {v} outside [0, 1]"),
            ));
        }
        data.push(v);
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_image(t)?).map_err(|e| Error::io(path, e))
}

/// Raw pixels in `[0, 1]`, before any normalization.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}
