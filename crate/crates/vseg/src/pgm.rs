//! Binary portable graymaps (P5, maxval 255).
//!
//! Images map byte `b` to `b / 255`; masks store raw label bytes. Several
//! graymaps may follow each other in one buffer.

use std::fs;
use std::path::Path;

use vseg_core::data::{Image, LabelMask};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("PGM byte {offset}: {reason}")]
pub struct PgmError {
    pub offset: usize,
    pub reason: String,
}

fn fail<T>(offset: usize, reason: impl Into<String>) -> std::result::Result<T, PgmError> {
    Err(PgmError {
        offset,
        reason: reason.into(),
    })
}

/// A decoded graymap: extents and one byte per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

impl Graymap {
    pub fn to_image(&self) -> Image {
        Image::new(
            self.width,
            self.height,
            self.bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
        .expect("extents match byte count")
    }

    pub fn to_mask(&self) -> std::result::Result<LabelMask, vseg_core::Error> {
        LabelMask::new(self.width, self.height, self.bytes.clone())
    }

    pub fn from_image(img: &Image) -> Self {
        Graymap {
            width: img.width(),
            height: img.height(),
            bytes: img.pixels().iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn from_mask(mask: &LabelMask) -> Self {
        Graymap {
            width: mask.width(),
            height: mask.height(),
            bytes: mask.labels().to_vec(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.bytes);
        out
    }
}

/// `round(v · 255)` of a value clamped to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Whitespace and `#` comments up to the next token.
    fn skip_separators(&mut self) {
        while let Some(&c) = self.buf.get(self.pos) {
            if c == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, PgmError> {
        self.skip_separators();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.buf.get(start) {
                None => fail(start, format!("truncated header: expected {what}")),
                Some(_) => fail(start, format!("expected {what} as a decimal number")),
            };
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| fail(start, format!("{what} too large")))
    }
}

/// Decode one graymap from the front of `buf`; returns it with the number of
/// bytes consumed.
pub fn decode(buf: &[u8]) -> std::result::Result<(Graymap, usize), PgmError> {
    decode_at(buf, 0)
}

fn decode_at(buf: &[u8], base: usize) -> std::result::Result<(Graymap, usize), PgmError> {
    let wrap = |e: PgmError| PgmError {
        offset: e.offset + base,
        reason: e.reason,
    };
    let mut c = Cursor { buf, pos: 0 };
    match buf.get(..2) {
        Some(b"P5") => {}
        Some([b'P', d]) if d.is_ascii_digit() => {
            return fail(base, format!("unsupported format P{}; only binary P5 is accepted", *d as char))
        }
        Some(_) => return fail(base, "bad magic: expected \"P5\""),
        None => return fail(base, "truncated header: expected \"P5\""),
    }
    c.pos = 2;
    if !buf.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return fail(base + 2, "expected whitespace after magic");
    }
    let width = c.number("width").map_err(wrap)?;
    let height = c.number("height").map_err(wrap)?;
    let maxval_at = {
        c.skip_separators();
        c.pos
    };
    let maxval = c.number("maxval").map_err(wrap)?;
    if maxval != 255 {
        return fail(base + maxval_at, format!("maxval {maxval} unsupported; expected 255"));
    }
    match buf.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        Some(_) => return fail(base + c.pos, "expected a single whitespace before pixel data"),
        None => return fail(base + c.pos, "truncated header: no pixel data"),
    }
    if width == 0 || height == 0 {
        return fail(base, format!("empty image {width}x{height}"));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| PgmError {
            offset: base,
            reason: format!("extents {width}x{height} overflow"),
        })?;
    let end = c.pos + n;
    if buf.len() < end {
        return fail(
            base + buf.len(),
            format!("truncated payload: expected {n} pixel bytes, found {}", buf.len() - c.pos),
        );
    }
    Ok((
        Graymap {
            width,
            height,
            bytes: buf[c.pos..end].to_vec(),
        },
        end,
    ))
}

/// Every graymap in `buf`, back to back; trailing whitespace is ignored.
pub fn decode_all(buf: &[u8]) -> std::result::Result<Vec<Graymap>, PgmError> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        while buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        if pos >= buf.len() {
            break;
        }
        let (g, used) = decode_at(&buf[pos..], pos)?;
        out.push(g);
        pos += used;
    }
    if out.is_empty() {
        return fail(0, "no image data");
    }
    Ok(out)
}

pub fn decode_image(buf: &[u8]) -> std::result::Result<Image, PgmError> {
    Ok(decode(buf)?.0.to_image())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = read(path)?;
    Ok(decode(&bytes).map_err(|e| Error::pgm(path, e))?.0.to_image())
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let bytes = read(path)?;
    let g = decode(&bytes).map_err(|e| Error::pgm(path, e))?.0;
    g.to_mask().map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &Graymap::from_image(img).encode())
}

pub fn save_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, &Graymap::from_mask(mask).encode())
}
