//! Binary PGM (P5, maxval 255) reading and writing.
//!
//! The writer always emits the canonical header "P5\n<w> <h>\n255\n"; the
//! reader additionally tolerates arbitrary whitespace between header tokens,
//! as the format allows.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, one byte per pixel.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> GrayImage {
        GrayImage {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn format_err(path: &Path, offset: usize, what: &str) -> Error {
    Error::Format(format!(
        "{}: {} at byte offset {}",
        path.display(),
        what,
        offset
    ))
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(format_err(path, 0, "missing P5 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(format_err(path, start, "expected decimal header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse::<usize>()
            .map_err(|_| format_err(path, start, "header field out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, pos, "maxval must be 255"));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, pos, "zero image dimension"));
    }
    let need = width * height;
    if bytes.len() - pos != need {
        return Err(format_err(
            path,
            pos,
            &format!("expected {} payload bytes, found {}", need, bytes.len() - pos),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn one_pixel_layout() {
        let img = GrayImage::new(1, 1);
        let bytes = encode_pgm(&img);
        // header "P5\n1 1\n255\n" (11 bytes) plus one data byte
        assert_eq!(&bytes[..11], b"P5\n1 1\n255\n");
        assert_eq!(bytes.len(), 12);
        assert_eq!(bytes[11], 0);
    }

    #[test]
    fn round_trip_random_grid() {
        let mut rng = SeededRng::new(42);
        let mut img = GrayImage::new(13, 7);
        for p in img.pixels.iter_mut() {
            *p = rng.next_below(256) as u8;
        }
        let back = decode_pgm(&encode_pgm(&img), Path::new("mem")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn bad_maxval_rejected() {
        let bytes = b"P5\n1 1\n254\n\x00";
        let e = decode_pgm(bytes, Path::new("mem")).unwrap_err();
        assert!(matches!(e, Error::Format(_)));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = b"P5\n2 2\n255\n\x00\x00";
        let e = decode_pgm(bytes, Path::new("mem")).unwrap_err();
        match e {
            Error::Format(msg) => assert!(msg.contains("offset 11"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let e = decode_pgm(b"P6\n1 1\n255\n\x00", Path::new("mem")).unwrap_err();
        match e {
            Error::Format(msg) => assert!(msg.contains("offset 0"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let mut img = GrayImage::new(4, 3);
        img.set(2, 1, 200);
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
    }
}
