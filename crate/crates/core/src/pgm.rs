//! Binary greyscale PGM (`P5`) reading and writing.
//!
//! Only 8-bit rasters with maxval 255 are accepted. Samples map to
//! `[0, 1]` by dividing by 255; writing rounds half up.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos, msg: msg.into() })
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Next decimal token and its starting offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse::<usize>() {
            Ok(v) => Ok((v, start)),
            Err(_) => {
                self.pos = start;
                self.fail(format!("{what} out of range"))
            }
        }
    }
}

/// Parse a `P5` image.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grid2D> {
    let mut cur = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return cur.fail("missing P5 magic");
    }
    cur.pos = 2;
    let (width, width_at) = cur.number("width")?;
    let (height, height_at) = cur.number("height")?;
    let (maxval, maxval_at) = cur.number("maxval")?;
    for (dim, at) in [(width, width_at), (height, height_at)] {
        if dim == 0 {
            return Err(Error::Format { offset: at, msg: "zero image dimension".into() });
        }
    }
    if maxval != 255 {
        return Err(Error::Format { offset: maxval_at, msg: format!("maxval must be 255, got {maxval}") });
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return cur.fail("expected single whitespace before raster"),
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format { offset: cur.pos, msg: "image too large".into() })?;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        cur.pos = bytes.len();
        return cur.fail(format!("raster truncated: need {need} bytes, found {}", raster.len()));
    }
    let data = raster[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Grid2D::new(height, width, data)
}

/// Quantise to 8 bits: clamp to `[0, 1]`, then `floor(v·255 + 0.5)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Serialise as `P5` with maxval 255.
pub fn encode_pgm(g: &Grid2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(g.data().iter().map(|&v| quantize(v)));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Grid2D> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, g: &Grid2D) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(g)).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
