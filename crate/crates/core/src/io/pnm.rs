//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    /// Grayscale.
    P5,
    /// RGB.
    P6,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::P5 => 1,
            PnmKind::P6 => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageFile {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// Interleaved samples, `height · width · channels` bytes.
    pub pixels: Vec<u8>,
}

/// Maps `[0, 1]` to a byte: clamp, scale by 255, round half up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments running to end of line.
    fn skip_separators(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
            if self.pos - start > 9 {
                return Err(Error::format(self.origin, start, format!("{what} is too large")));
            }
        }
        if start == self.pos {
            return Err(Error::format(self.origin, start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ASCII digits");
        Ok(text.parse().expect("at most nine digits"))
    }
}

pub fn decode_pnm(bytes: &[u8], origin: &str) -> Result<ImageFile> {
    let kind = match bytes.get(..2) {
        Some(b"P6") => PnmKind::P6,
        Some(b"P5") => PnmKind::P5,
        _ => return Err(Error::format(origin, 0, "bad magic, expected P5 or P6")),
    };
    let mut cur = Cursor { bytes, pos: 2, origin };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::format(origin, 2, "expected whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(origin, maxval_at, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::format(origin, maxval_at, format!("maxval must be 255, found {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format(origin, cur.pos, "expected a single whitespace byte after maxval")),
    }
    let want = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(kind.channels()))
        .ok_or_else(|| Error::format(origin, 0, "image dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < want {
        return Err(Error::format(
            origin,
            bytes.len(),
            format!("truncated pixel data: expected {want} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > want {
        return Err(Error::format(origin, cur.pos + want, "trailing bytes after pixel data"));
    }
    Ok(ImageFile {
        kind,
        width,
        height,
        pixels: payload.to_vec(),
    })
}

pub fn encode_pnm(img: &ImageFile) -> Vec<u8> {
    let magic = match img.kind {
        PnmKind::P5 => "P5",
        PnmKind::P6 => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

impl ImageFile {
    /// `(1, 3, h, w)` with values `v / 255`; grayscale is replicated to RGB.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let ch = self.kind.channels();
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            let src = if ch == 1 { 0 } else { c };
            for p in 0..plane {
                data[c * plane + p] = self.pixels[p * ch + src] as f64 / 255.0;
            }
        }
        Tensor::from_parts(Shape::new(1, 3, self.height, self.width), data)
    }

    /// Quantizes a `(1, 3, h, w)` (P6) or `(1, 1, h, w)` (P5) tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        let kind = match (s.n, s.c) {
            (1, 3) => PnmKind::P6,
            (1, 1) => PnmKind::P5,
            _ => return Err(Error::shape(format!("cannot store {s} as an image; need (1, 3|1, h, w)"))),
        };
        let plane = s.plane();
        let mut pixels = vec![0u8; plane * s.c];
        for c in 0..s.c {
            for (p, v) in t.plane(0, c).iter().enumerate() {
                pixels[p * s.c + c] = quantize(*v);
            }
        }
        Ok(ImageFile {
            kind,
            width: s.w,
            height: s.h,
            pixels,
        })
    }
}

pub fn read_image_file(path: &Path) -> Result<ImageFile> {
    decode_pnm(&super::read_file(path)?, &path.display().to_string())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    Ok(read_image_file(path)?.to_tensor())
}

pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_pnm(&ImageFile::from_tensor(t)?))
}
