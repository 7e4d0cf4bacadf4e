//! Binary PGM (P5, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Pixels `>= 128` are object.
    pub fn to_mask(&self) -> Mask {
        Mask::new(
            self.width,
            self.height,
            self.pixels.iter().map(|&p| p >= 128).collect(),
        )
        .expect("image dims")
    }

    /// 0 for background, 255 for object.
    pub fn from_mask(mask: &Mask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            pixels: mask
                .bits()
                .iter()
                .map(|&b| if b { 255 } else { 0 })
                .collect(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        })
    }

    /// Skips whitespace and `#` comments.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.fail(format!("{what} out of range"))
            }
        }
    }
}

/// Parses a P5 file held in memory. `path` only labels errors.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if bytes.get(..2) != Some(b"P5") {
        return cur.fail("not a binary PGM (expected magic P5)");
    }
    cur.pos = 2;
    if !bytes
        .get(2)
        .is_some_and(|b| b.is_ascii_whitespace() || *b == b'#')
    {
        return cur.fail("expected whitespace after magic");
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_separators();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        cur.pos = maxval_at;
        return cur.fail(format!("maxval {maxval} unsupported, expected 255"));
    }
    if width == 0 || height == 0 {
        return cur.fail("zero image extent");
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return cur.fail("expected a single whitespace before the raster");
    }
    cur.pos += 1;
    let need = width.checked_mul(height).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: cur.pos,
        message: "image extent overflows".into(),
    })?;
    let available = bytes.len() - cur.pos;
    if available < need {
        cur.pos = bytes.len();
        return cur.fail(format!("truncated raster: {available} of {need} bytes"));
    }
    GrayImage::new(width, height, bytes[cur.pos..cur.pos + need].to_vec())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    super::write_atomic(path, &encode_pgm(img))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_pgm(path)?.to_mask())
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm(path, &GrayImage::from_mask(mask))
}
