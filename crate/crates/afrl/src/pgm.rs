//! Binary PGM (P5) encode/decode, the only image file format the crate
//! reads or writes. 8-bit values are mapped to `[0,1]` by dividing by the
//! file's maxval; writing always uses maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;

// Guards against absurd allocations when decoding untrusted bytes.
const MAX_DIMENSION: usize = 1 << 16;
const MAX_PIXELS: usize = 1 << 26;

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.reserve(img.width() * img.height());
    out.extend(
        img.pixels()
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(2) != Some(b"P5" as &[u8]) {
        return Err(Error::Pgm("missing P5 magic".into()));
    }
    let width = cur.ascii_number("width")?;
    let height = cur.ascii_number("height")?;
    let maxval = cur.ascii_number("maxval")?;
    if width == 0 || height == 0 || width > MAX_DIMENSION || height > MAX_DIMENSION {
        return Err(Error::Pgm(format!("bad dimensions {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::Pgm(format!("maxval {maxval} not in 1..=255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match cur.next_byte() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::Pgm("missing raster separator".into())),
    }
    let n = width
        .checked_mul(height)
        .filter(|&n| n <= MAX_PIXELS)
        .ok_or_else(|| Error::Pgm("pixel count overflow".into()))?;
    let raster = cur
        .take(n)
        .ok_or_else(|| Error::Pgm(format!("raster truncated: expected {n} bytes")))?;
    let scale = maxval as f64;
    let pixels = raster.iter().map(|&b| b as f64 / scale).collect();
    GrayImage::from_pixels(width, height, pixels)
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Pgm(msg) => Error::Pgm(format!("{}: {msg}", path.display())),
        other => other,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next_byte(&mut self) -> Option<u8> {
        let b = self.bytes.get(self.pos).copied();
        if b.is_some() {
            self.pos += 1;
        }
        b
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    /// Skips whitespace and `#` comment lines, then reads a decimal field.
    fn ascii_number(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => {
                    self.pos += 1;
                }
                Some(b'#') => {
                    while let Some(b) = self.next_byte() {
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let mut value: usize = 0;
        let mut digits = 0usize;
        while let Some(b) = self.peek() {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| Error::Pgm(format!("{what} overflows")))?;
            digits += 1;
            self.pos += 1;
        }
        if digits == 0 {
            return Err(Error::Pgm(format!("expected {what}")));
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::generate_texture;

    #[test]
    fn round_trip_is_bit_exact_for_8bit_images() {
        let img = generate_texture(23, 17, 42);
        let decoded = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(decoded, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 2\n# another\n255\n".to_vec();
        bytes.extend([0u8, 128, 255, 64]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.get(1, 0), 128.0 / 255.0);
    }

    #[test]
    fn smaller_maxval_rescales() {
        let mut bytes = b"P5 2 1 100\n".to_vec();
        bytes.extend([50u8, 100]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.get(0, 0), 0.5);
        assert_eq!(img.get(1, 0), 1.0);
    }

    #[test]
    fn rejects_truncation_and_junk() {
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00\x01").is_err());
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n0 3\n255\n").is_err());
        assert!(decode_pgm(b"P5\n2 2\n999\n\x00\x00\x00\x00").is_err());
        assert!(decode_pgm(b"").is_err());
    }
}
