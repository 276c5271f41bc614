//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Self {
        RgbImage {
            height,
            width,
            pixels: color.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, c: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, body) = parse_header(bytes, b"P6")?;
        if body.len() != width * height * 3 {
            return Err(Error::format(
                "PPM",
                format!("expected {} pixel bytes, found {}", width * height * 3, body.len()),
            ));
        }
        Ok(RgbImage {
            height,
            width,
            pixels: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Min-max normalizes `values` to 0..=255 and encodes a P5 image. A constant
/// map encodes as all zeros.
pub fn heatmap_pgm(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::Shape {
            op: "heatmap_pgm",
            lhs: vec![height, width],
            rhs: vec![values.len()],
        });
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Width, height and sample bytes of a P5 image.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, body) = parse_header(bytes, b"P5")?;
    if body.len() != w * h {
        return Err(Error::format(
            "PGM",
            format!("expected {} bytes, found {}", w * h, body.len()),
        ));
    }
    Ok((w, h, body.to_vec()))
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(Error::format("netpbm", "bad magic"));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("netpbm", "header field is not a number"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format("netpbm", format!("unsupported maxval {}", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("netpbm", "missing separator after header"));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}
