//! Binary masks and the portable-anymap files used for masks and overlays.

use std::path::Path;

use crate::error::{Error, Result};

/// Binary raster, row-major with rows (`h`) outer and columns (`w`) inner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "mask of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, w: usize, h: usize) -> bool {
        self.data[h * self.width + w]
    }

    pub fn set(&mut self, w: usize, h: usize, value: bool) {
        self.data[h * self.width + w] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// Binary P5 graymap, 0 or 255 per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| if *v { 255u8 } else { 0u8 }));
        out
    }

    /// Parses a P5 graymap; pixels at or above 128 are set.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (fields, offset) = parse_header(bytes, 3)?;
        let (width, height, maxval) = (fields[0], fields[1], fields[2]);
        if &bytes[..2] != b"P5" {
            return Err(Error::format("PGM", "missing P5 magic"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::format("PGM", format!("bad maxval {maxval}")));
        }
        let bpp = if maxval < 256 { 1 } else { 2 };
        let need = width * height * bpp;
        let body = &bytes[offset..];
        if body.len() < need {
            return Err(Error::format(
                "PGM",
                format!("expected {need} data bytes, found {}", body.len()),
            ));
        }
        let data = (0..width * height)
            .map(|i| {
                let v = if bpp == 1 {
                    body[i] as usize
                } else {
                    ((body[2 * i] as usize) << 8) | body[2 * i + 1] as usize
                };
                v * 255 >= 128 * maxval
            })
            .collect();
        Mask::new(width, height, data)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Mask::from_pgm(&bytes)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Reads `count` whitespace-separated decimal header fields after the magic,
/// skipping `#` comments. Returns the fields and the offset of the raster data.
fn parse_header(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 2 {
        return Err(Error::format("PNM", "truncated header"));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(count);
    while fields.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("PNM", "expected a header number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields.push(
            text.parse()
                .map_err(|_| Error::format("PNM", format!("bad number {text}")))?,
        );
    }
    // Exactly one whitespace byte separates the header from the data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("PNM", "missing separator after header"));
    }
    Ok((fields, pos + 1))
}

/// 8-bit RGB image written as binary P6.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![[0, 0, 0]; width * height],
        }
    }

    pub fn put(&mut self, w: usize, h: usize, rgb: [u8; 3]) {
        self.data[h * self.width + w] = rgb;
    }

    pub fn get(&self, w: usize, h: usize) -> [u8; 3] {
        self.data[h * self.width + w]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.data {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (fields, offset) = parse_header(bytes, 3)?;
        if &bytes[..2] != b"P6" || fields[2] != 255 {
            return Err(Error::format("PPM", "expected 8-bit P6"));
        }
        let (width, height) = (fields[0], fields[1]);
        let body = &bytes[offset..];
        if body.len() < 3 * width * height {
            return Err(Error::format("PPM", "truncated raster"));
        }
        let data = body[..3 * width * height]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }
}
