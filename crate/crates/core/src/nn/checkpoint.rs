//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SHFTPOSE"
//! version      u32      FORMAT_VERSION
//! desc_len     u32      byte length of the descriptor
//! descriptor   desc_len bytes of UTF-8 JSON (architecture and training metadata)
//! blob_count   u32
//! blob_count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank x u32
//!   values     product(dims) x f32
//! ```
//!
//! Blob names are the dotted parameter paths produced by [`HasParams`]; what else goes in (running
//! statistics, optimizer moments) is up to the caller.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{HasParams, Tensor};

pub const MAGIC: &[u8; 8] = b"SHFTPOSE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint descriptor: {0}")]
    Descriptor(#[from] serde_json::Error),
    #[error("checkpoint is missing blob {0}")]
    MissingBlob(String),
    #[error("blob {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: serde_json::Value,
    pub blobs: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(descriptor: serde_json::Value) -> Self {
        Self {
            descriptor,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.blobs.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every parameter and buffer of `model` under `prefix`.
    pub fn push_model<M: HasParams<f32> + ?Sized>(&mut self, model: &mut M, prefix: &str) {
        let mut params = Vec::new();
        model.named_params(prefix, &mut params);
        for (name, p) in params {
            self.push(name, p.value.clone());
        }
        let mut buffers = Vec::new();
        model.named_buffers(prefix, &mut buffers);
        for (name, b) in buffers {
            self.push(name, b.clone());
        }
    }

    /// Copies parameters and buffers of `model` back out of the checkpoint. Every name must be
    /// present with a matching shape; nothing is written unless all of them are.
    pub fn load_model<M: HasParams<f32> + ?Sized>(
        &self,
        model: &mut M,
        prefix: &str,
    ) -> Result<(), CheckpointError> {
        let mut wanted: Vec<(String, Vec<usize>)> = Vec::new();
        {
            let mut params = Vec::new();
            model.named_params(prefix, &mut params);
            wanted.extend(params.into_iter().map(|(n, p)| (n, p.value.shape().to_vec())));
        }
        {
            let mut buffers = Vec::new();
            model.named_buffers(prefix, &mut buffers);
            wanted.extend(buffers.into_iter().map(|(n, b)| (n, b.shape().to_vec())));
        }
        for (name, shape) in &wanted {
            let src = self
                .get(name)
                .ok_or_else(|| CheckpointError::MissingBlob(name.clone()))?;
            if src.shape() != &shape[..] {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: src.shape().to_vec(),
                });
            }
        }
        {
            let mut params = Vec::new();
            model.named_params(prefix, &mut params);
            for (name, p) in params {
                p.value.data_mut().copy_from_slice(self.get(&name).unwrap().data());
            }
        }
        let mut buffers = Vec::new();
        model.named_buffers(prefix, &mut buffers);
        for (name, b) in buffers {
            b.data_mut().copy_from_slice(self.get(&name).unwrap().data());
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let desc = serde_json::to_vec(&self.descriptor)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_u32(&mut w, desc.len())?;
        w.write_all(&desc)?;
        write_u32(&mut w, self.blobs.len())?;
        for (name, t) in &self.blobs {
            write_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(&mut w, d)?;
            }
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let desc = read_bytes(&mut r)?;
        let descriptor = serde_json::from_slice(&desc)?;
        let count = read_u32(&mut r)?;
        let mut blobs = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| CheckpointError::Malformed("blob name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("blob {name} has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= 1 << 30)
                .ok_or_else(|| CheckpointError::Malformed(format!("blob {name} is too large")))?;
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(&dims, values)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            blobs.push((name, t));
        }
        Ok(Self { descriptor, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 26 {
        return Err(CheckpointError::Malformed(format!("length field {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
