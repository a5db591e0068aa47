//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BRANCHFORMER-CHECKPOINT\n"
//! u32 header length, header bytes: UTF-8 `key=value` lines, the first
//!     being `format_version=<n>`
//! u32 tensor count, then per tensor:
//!     u32 name length, name bytes
//!     u32 rank, rank × u64 dims
//!     numel × f64 values
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! Nothing may follow the checksum.

use std::collections::BTreeMap;
use std::path::Path;

use crate::params::Parameters;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"BRANCHFORMER-CHECKPOINT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parameter {name}: checkpoint shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("checkpoint header: {0}")]
    Header(String),
}

impl CheckpointError {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointError::Io(_) => "checkpoint_io",
            CheckpointError::BadMagic => "checkpoint_bad_magic",
            CheckpointError::VersionMismatch { .. } => "checkpoint_version",
            CheckpointError::Truncated(_) => "checkpoint_truncated",
            CheckpointError::Corrupt(_) => "checkpoint_corrupt",
            CheckpointError::ShapeMismatch { .. } => "checkpoint_shape_mismatch",
            CheckpointError::MissingParameter(_) => "checkpoint_missing_parameter",
            CheckpointError::UnexpectedParameter(_) => "checkpoint_unexpected_parameter",
            CheckpointError::Header(_) => "checkpoint_header",
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures every parameter of `params` in traversal order.
    pub fn from_params<P: Parameters + ?Sized>(header: BTreeMap<String, String>, params: &P) -> Self {
        let mut tensors = Vec::new();
        params.visit("", &mut |name, t| {
            tensors.push((
                name.to_string(),
                Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            ))
        });
        Self { header, tensors }
    }

    /// Copies stored values into `params`, requiring an exact name and shape match.
    pub fn restore_into<P: Parameters + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut by_name: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in &self.tensors {
            if by_name.insert(name, t).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
            }
        }
        let mut err = None;
        let mut seen = 0;
        params.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match by_name.get(name) {
                None => err = Some(CheckpointError::MissingParameter(name.to_string())),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: src.shape().to_vec(),
                    })
                }
                Some(src) => {
                    t.data_mut().copy_from_slice(src.data());
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != by_name.len() {
            let mut expected = std::collections::BTreeSet::new();
            params.visit("", &mut |name, _| {
                expected.insert(name.to_string());
            });
            let extra = by_name
                .keys()
                .find(|k| !expected.contains(**k))
                .map(|k| k.to_string())
                .unwrap_or_default();
            return Err(CheckpointError::UnexpectedParameter(extra));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut header = format!("format_version={FORMAT_VERSION}\n");
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = r.u32("header length")? as usize;
        let htext = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| CheckpointError::Corrupt("header is not UTF-8".into()))?;
        let mut lines = htext.lines();
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("format_version="))
            .ok_or_else(|| CheckpointError::Header("first line must be format_version".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(CheckpointError::VersionMismatch {
                found: version.to_string(),
                expected: FORMAT_VERSION,
            });
        }
        let mut header = BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(format!("malformed line {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "parameter name")?)
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(CheckpointError::Corrupt(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8, "dimension")?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| CheckpointError::Corrupt(format!("{name}: dimension {d}")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: shape overflow")))?;
            let nbytes = numel
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: size overflow")))?;
            let raw = r.take(nbytes, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Corrupt(format!(
                "checksum {stored:08x} does not match contents ({computed:08x})"
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Header(format!("missing key {key}")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
