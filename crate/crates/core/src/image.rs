//! Single-channel images and binary PGM ("P5") I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Invalid(format!(
                "{} pixels for a {height}×{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.pixels.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / self.pixels.len() as f64).sqrt()
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

/// Parses a binary PGM with maxval ≤ 65535; samples are divided by maxval.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5) file".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what} in header"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width * height;
    let depth = if maxval < 256 { 1 } else { 2 };
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() < n * depth {
        return Err(format!("raster has {} bytes, expected {}", raster.len(), n * depth));
    }
    let max = maxval as f64;
    let pixels = (0..n)
        .map(|i| {
            let v = if depth == 1 {
                raster[i] as usize
            } else {
                u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as usize
            };
            if v > maxval {
                Err(format!("sample {v} exceeds maxval {maxval}"))
            } else {
                Ok(v as f64 / max)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(GrayImage { height, width, pixels })
}

/// Quantizes `[0, 1]` pixels to `maxval` levels (255 → 8-bit, larger → 16-bit).
pub fn encode_pgm(img: &GrayImage, maxval: u16) -> Vec<u8> {
    let maxval = maxval.max(1);
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, maxval).into_bytes();
    let max = maxval as f64;
    for &p in &img.pixels {
        let q = (p.clamp(0.0, 1.0) * max).round() as u16;
        if maxval < 256 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage, maxval: u16) -> Result<()> {
    fs::write(path, encode_pgm(img, maxval)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_endpoints() {
        let mut bytes = b"P5\n# comment\n3 1\n255\n".to_vec();
        bytes.extend([0u8, 255, 51]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.height, img.width), (1, 3));
        assert_eq!(img.pixels, vec![0.0, 1.0, 0.2]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let mut bytes = b"P5 2 1 65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x01]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.pixels, vec![1.0, 1.0 / 65535.0]);
    }

    #[test]
    fn round_trip_is_exact_on_grid_values() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 128.0 / 255.0, 7.0 / 255.0]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&img, 255)).unwrap(), img);
        let img16 = GrayImage::new(1, 2, vec![1000.0 / 65535.0, 1.0]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&img16, 65535)).unwrap(), img16);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(decode_pgm(b"P2 1 1 255\n0").is_err());
        assert!(decode_pgm(b"P5 2 2 255\n\x00").is_err());
        assert!(decode_pgm(b"P5 1 1 10\n\x0b").is_err());
        assert!(decode_pgm(b"P5 1").is_err());
    }

    #[test]
    fn file_errors_carry_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        assert!(matches!(read_pgm(&p), Err(Error::Io { .. })));
        fs::write(&p, b"junk").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Image { .. })));
    }
}
