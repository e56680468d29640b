//! Versioned checkpoint container: magic "KTM1", header, named tensor
//! records, trailing CRC-64. Round-trips are bit-exact and the checksum is
//! validated before any tensor is materialized.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{Dtype, Scalar};

pub const MAGIC: &[u8; 4] = b"KTM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes (not a KTM1 checkpoint)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    BadChecksum { stored: u64, computed: u64 },
    #[error("dtype tag {got} does not match requested element type {want}")]
    DtypeMismatch { got: u8, want: u8 },
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<S> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

/// CRC-64/XZ (reflected, poly 0x42F0E1EBA9EA3693).
pub fn crc64(bytes: &[u8]) -> u64 {
    const POLY: u64 = 0xC96C_5795_D787_0F42;
    let mut crc = !0u64;
    for &b in bytes {
        crc ^= b as u64;
        for _ in 0..8 {
            if crc & 1 == 1 {
                crc = (crc >> 1) ^ POLY;
            } else {
                crc >>= 1;
            }
        }
    }
    !crc
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a checkpoint to bytes: header, config snapshot, tensor records,
/// trailing CRC-64 over everything before it.
pub fn to_bytes<S: Scalar>(config: &str, tensors: &[NamedTensor<S>]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, config.len() as u32);
    buf.extend_from_slice(config.as_bytes());
    put_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        put_u32(&mut buf, t.name.len() as u32);
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(S::DTYPE.tag());
        put_u32(&mut buf, 2); // rank
        put_u64(&mut buf, t.rows as u64);
        put_u64(&mut buf, t.cols as u64);
        for &v in &t.data {
            match S::DTYPE {
                Dtype::F32 => buf.extend_from_slice(&(v.to_f32().unwrap()).to_le_bytes()),
                Dtype::F64 => buf.extend_from_slice(&(v.to_f64().unwrap()).to_le_bytes()),
            }
        }
    }
    let crc = crc64(&buf);
    put_u64(&mut buf, crc);
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes. The checksum is verified before any tensor data
/// is decoded.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(String, Vec<NamedTensor<S>>), CheckpointError> {
    if bytes.len() < 8 + 8 {
        return Err(CheckpointError::Malformed("too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = crc64(body);
    if stored != computed {
        return Err(CheckpointError::BadChecksum { stored, computed });
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let cfg_len = c.u32()? as usize;
    let config = String::from_utf8(c.take(cfg_len)?.to_vec())
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let tag = c.take(1)?[0];
        if tag != S::DTYPE.tag() {
            return Err(CheckpointError::DtypeMismatch { got: tag, want: S::DTYPE.tag() });
        }
        let rank = c.u32()?;
        if rank != 2 {
            return Err(CheckpointError::Malformed(format!("unsupported rank {rank}")));
        }
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let n = rows * cols;
        let elem = match S::DTYPE {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = c.take(n * elem)?;
        let data: Vec<S> = match S::DTYPE {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| S::from_f32(f32::from_le_bytes(b.try_into().unwrap())).unwrap())
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|b| S::from_f64(f64::from_le_bytes(b.try_into().unwrap())).unwrap())
                .collect(),
        };
        tensors.push(NamedTensor { name, rows, cols, data });
    }
    if c.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes before checksum",
            body.len() - c.pos
        )));
    }
    Ok((config, tensors))
}

pub fn save<S: Scalar>(path: &Path, config: &str, tensors: &[NamedTensor<S>]) -> Result<(), CheckpointError> {
    let bytes = to_bytes(config, tensors);
    let mut f = std::fs::File::create(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load<S: Scalar>(path: &Path) -> Result<(String, Vec<NamedTensor<S>>), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    from_bytes(&bytes)
}

/// Snapshot every tensor of a parameter store, in insertion order.
pub fn store_tensors<S: Scalar>(store: &ParamStore<S>) -> Vec<NamedTensor<S>> {
    store
        .iter()
        .map(|(_, e)| NamedTensor {
            name: e.name.clone(),
            rows: e.rows,
            cols: e.cols,
            data: e.data.as_ref().clone(),
        })
        .collect()
}
