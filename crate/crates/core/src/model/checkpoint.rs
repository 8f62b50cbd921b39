//! Binary parameter container.
//!
//! ```text
//! magic "CRFTCK01"
//! u32 arch-id length, UTF-8 arch-id
//! u32 codebook CRC-32
//! u8  element width in bytes (4 = binary32, 8 = binary64)
//! u32 metadata length, UTF-8 JSON metadata
//! u32 blob count
//! per blob: u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//!           u64 payload byte length, little-endian payload
//! u32 CRC-32 of everything between the magic and this field
//! ```

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRFTCK01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Binary32,
    Binary64,
}

impl Precision {
    fn width(self) -> u8 {
        match self {
            Precision::Binary32 => 4,
            Precision::Binary64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_id: String,
    pub codebook_crc: u32,
    pub metadata: serde_json::Value,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(arch_id: &str, codebook_crc: u32) -> Self {
        Self { arch_id: arch_id.to_string(), codebook_crc, metadata: serde_json::json!({}), blobs: Vec::new() }
    }

    pub fn push_all(&mut self, prefix: &str, named: Vec<(String, Tensor)>) {
        for (n, t) in named {
            self.blobs.push((format!("{prefix}{n}"), t));
        }
    }

    /// Blobs under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.blobs
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut body = Vec::new();
        put_str(&mut body, &self.arch_id);
        body.extend_from_slice(&self.codebook_crc.to_le_bytes());
        body.push(precision.width());
        put_str(&mut body, &self.metadata.to_string());
        body.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, t) in &self.blobs {
            put_str(&mut body, name);
            body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let bytes = t.numel() as u64 * precision.width() as u64;
            body.extend_from_slice(&bytes.to_le_bytes());
            for &v in t.data() {
                match precision {
                    Precision::Binary32 => body.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::Binary64 => body.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&body);
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(CheckpointError::Format("truncated".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..8])
            )));
        }
        let body = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::Format("crc mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let arch_id = r.string()?;
        let codebook_crc = r.u32()?;
        let width = r.u8()?;
        if width != 4 && width != 8 {
            return Err(CheckpointError::Format(format!("unsupported element width {width}")));
        }
        let metadata: serde_json::Value =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let nbytes = r.u64()? as usize;
            let numel: usize = shape.iter().product();
            if nbytes != numel * width as usize {
                return Err(CheckpointError::Format(format!("{name}: {nbytes} bytes for shape {shape:?}")));
            }
            let raw = r.take(nbytes)?;
            let data = if width == 4 {
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
            } else {
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            };
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            blobs.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self { arch_id, codebook_crc, metadata, blobs })
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes(precision))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))
    }
}
