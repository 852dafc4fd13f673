//! Binary checkpoint container shared by backbones, adapters and heads.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PEFT"            4 bytes magic
//! version           u16 (= 1)
//! tensor count      u32
//! per tensor:
//!   name length     u32, followed by that many UTF-8 bytes
//!   dtype           u8   (0 = f32, 1 = f64)
//!   rank            u8
//!   extents         rank × u64
//!   payload         product(extents) × dtype width
//! footer length     u32, followed by canonical key=value text
//! crc32             u32 over every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::{Precision, Tensor};
use crate::vit::{ViTConfig, ViTModel};

pub const MAGIC: &[u8; 4] = b"PEFT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: KvMap,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, self.pos as u64, msg)
    }
}

impl Checkpoint {
    pub fn new(meta: KvMap) -> Self {
        Checkpoint {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no tensor '{name}'")))
    }

    /// Encodes with payloads in `dtype`. `F32` rounds values.
    pub fn to_bytes(&self, dtype: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match dtype {
                Precision::F32 => 0,
                Precision::F64 => 1,
            });
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match dtype {
                Precision::F32 => {
                    for &x in t.data() {
                        out.extend_from_slice(&(x as f32).to_le_bytes());
                    }
                }
                Precision::F64 => {
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let footer = self.meta.to_canonical();
        out.extend_from_slice(&(footer.len() as u32).to_le_bytes());
        out.extend_from_slice(footer.as_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 + 2 + 4 + 4 + 4 {
            return Err(Error::format(path, bytes.len() as u64, "file too short"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::format(
                path,
                (bytes.len() - 4) as u64,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        let mut r = Reader {
            bytes: body,
            pos: 0,
            path,
        };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(path, 0, "bad magic, expected PEFT"));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("extent")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| r.err(format!("extents {shape:?} overflow")))?;
            let width = match dtype {
                0 => 4,
                1 => 8,
                other => return Err(r.err(format!("unknown dtype tag {other}"))),
            };
            let bytes_needed = n
                .checked_mul(width)
                .ok_or_else(|| r.err(format!("extents {shape:?} overflow")))?;
            let data: Vec<f64> = match dtype {
                0 => r
                    .take(bytes_needed, "f32 payload")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                1 => r
                    .take(bytes_needed, "f64 payload")?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                _ => unreachable!(),
            };
            let t = Tensor::new(shape, data).map_err(|e| r.err(e.to_string()))?;
            tensors.push((name, t));
        }
        let flen = r.u32("footer length")? as usize;
        let footer = std::str::from_utf8(r.take(flen, "footer")?)
            .map_err(|_| r.err("footer is not UTF-8"))?;
        let meta = KvMap::parse(footer)?;
        if r.pos != body.len() {
            return Err(r.err("trailing bytes before checksum"));
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: &Path, dtype: Precision) -> Result<()> {
        std::fs::write(path, self.to_bytes(dtype)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Git-style content hash: SHA-256 of `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    crate::hex(&h.finalize())
}

pub fn backbone_checkpoint(model: &ViTModel) -> Checkpoint {
    let mut meta = KvMap::new();
    meta.set("kind", "backbone");
    meta.extend(model.config.to_pairs());
    let mut ck = Checkpoint::new(meta);
    model.weights.visit(|name, t| ck.push(name, t.clone()));
    ck
}

pub fn backbone_from_checkpoint(ck: &Checkpoint) -> Result<ViTModel> {
    if ck.meta.get("kind") != Some("backbone") {
        return Err(Error::config("checkpoint is not a backbone"));
    }
    let config = ViTConfig::from_kv(&ck.meta)?;
    let weights = config.shapes().try_map(|name, shape| {
        let t = ck.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::dim(format!(
                "tensor '{name}' has shape {:?}, config expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    })?;
    ViTModel::from_weights(config, weights)
}
