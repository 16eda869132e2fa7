//! Checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VSEG"                      magic
//! u16                         format version (1)
//! u8  variant id, u8 depth, u16 base_width, u8 num_classes,
//! u16 input_size, u8 dropout percent
//! u32                         tensor count
//! per tensor:
//!   u16 name length, UTF-8 name, u8 rank, u32 extent × rank,
//!   f32 × product(extents), row-major
//! u32                         CRC32 of every preceding byte
//! ```
//!
//! Weights are stored at rank 4 and biases at rank 1.

use std::fs;
use std::path::Path;

use vseg_core::model::{ModelSpec, ParamSet, Variant};
use vseg_core::{Shape, Tensor};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"VSEG";
pub const VERSION: u16 = 1;
/// Magic, version, spec block and tensor count.
pub const HEADER_LEN: usize = 4 + 2 + 8 + 4;
pub const TRAILER_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("truncated at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("bad magic {found:?}; not a checkpoint")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {0}; this build reads version {VERSION}")]
    UnsupportedVersion(u16),
    #[error("unknown variant id {0}")]
    UnknownVariant(u8),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("tensor name at byte {offset} is not UTF-8")]
    BadName { offset: usize },
    #[error("tensor `{name}` has unsupported rank {rank}")]
    BadRank { name: String, rank: u8 },
    #[error("duplicate tensor `{0}`")]
    Duplicate(String),
    #[error("missing layer tensor `{0}`")]
    MissingLayer(String),
    #[error("unexpected extra tensor `{0}`")]
    ExtraLayer(String),
    #[error("tensor `{name}` has shape {found}, spec requires {expected}")]
    WrongShape {
        name: String,
        found: Shape,
        expected: Shape,
    },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("{0} trailing bytes after the checksum")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}; file is corrupt")]
    Checksum { stored: u32, computed: u32 },
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

fn bias_like(name: &str) -> bool {
    name.ends_with(".b")
}

/// Serialise `spec` and `params` (which must be complete for `spec`).
pub fn encode(spec: &ModelSpec, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    spec.validate()?;
    params.check_complete(spec)?;
    Ok(encode_unchecked(spec, params))
}

fn encode_unchecked(spec: &ModelSpec, params: &ParamSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(spec.variant.id());
    out.push(spec.depth as u8);
    out.extend_from_slice(&(spec.base_width as u16).to_le_bytes());
    out.push(spec.num_classes as u8);
    out.extend_from_slice(&(spec.input_size as u16).to_le_bytes());
    out.push((spec.dropout * 100.0).round() as u8);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = t.shape();
        let dims: Vec<usize> = if bias_like(name) { vec![s.c] } else { s.dims().to_vec() };
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Expected file size for a parameter set.
pub fn encoded_len(params: &ParamSet<f32>) -> usize {
    HEADER_LEN
        + params
            .iter()
            .map(|(name, t)| {
                let rank = if bias_like(name) { 1 } else { 4 };
                2 + name.len() + 1 + 4 * rank + 4 * t.numel()
            })
            .sum::<usize>()
        + TRAILER_LEN
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> CkResult<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - rest,
                what,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> CkResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> CkResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parse and validate a checkpoint. Structure is checked before the
/// checksum, so truncation and layout errors are reported as such.
pub fn decode(buf: &[u8]) -> CkResult<(ModelSpec, ParamSet<f32>)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let vid = r.u8("variant id")?;
    let variant = Variant::from_id(vid).ok_or(CheckpointError::UnknownVariant(vid))?;
    let spec = ModelSpec {
        variant,
        depth: usize::from(r.u8("depth")?),
        base_width: usize::from(r.u16("base width")?),
        num_classes: usize::from(r.u8("class count")?),
        input_size: usize::from(r.u16("input size")?),
        dropout: f64::from(r.u8("dropout")?) / 100.0,
    };
    spec.validate()
        .map_err(|e| CheckpointError::InvalidSpec(e.to_string()))?;
    let count = r.u32("tensor count")?;

    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = usize::from(r.u16("name length")?);
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::BadName { offset: at })?
            .to_string();
        let rank = r.u8("rank")?;
        let mut dims = Vec::with_capacity(usize::from(rank));
        for _ in 0..rank {
            dims.push(r.u32("extents")? as usize);
        }
        let Some(byte_len) = dims.iter().try_fold(4usize, |a, &d| a.checked_mul(d)) else {
            return Err(CheckpointError::Truncated {
                offset: r.pos,
                needed: usize::MAX,
                what: "tensor values",
            });
        };
        let shape = match dims[..] {
            [c] => Shape::new(1, c, 1, 1),
            [n, c, h, w] => Shape::new(n, c, h, w),
            _ => return Err(CheckpointError::BadRank { name, rank }),
        };
        let raw = r.take(byte_len, "tensor values")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(shape, data).expect("length matches shape");
        if params.get(&name).is_some() {
            return Err(CheckpointError::Duplicate(name));
        }
        params.insert(name, t).expect("checked duplicate");
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos));
    }

    let expected = spec.param_shapes();
    for (name, shape) in &expected {
        match params.get(name) {
            None => return Err(CheckpointError::MissingLayer(name.clone())),
            Some(t) if t.shape() != *shape => {
                return Err(CheckpointError::WrongShape {
                    name: name.clone(),
                    found: t.shape(),
                    expected: *shape,
                })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.iter().any(|(e, _)| e == n)) {
        return Err(CheckpointError::ExtraLayer(extra.to_string()));
    }

    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if let Some((name, _)) = params.iter().find(|(_, t)| !t.all_finite()) {
        return Err(CheckpointError::NonFinite(name.to_string()));
    }
    Ok((spec, params))
}

pub fn save_checkpoint(spec: &ModelSpec, params: &ParamSet<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(spec, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ParamSet<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
