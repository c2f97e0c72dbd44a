//! Minimal grayscale image I/O: binary PGM (P5) natively, PNG via the
//! `image` crate. All pixels are 8-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, SaltError};

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> SaltError {
    SaltError::Data(format!("{}: {msg}", path.display()))
}

fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    if !bytes.starts_with(b"P5") {
        return Err(fmt_err(path, "not a binary PGM (missing P5 magic)"));
    }
    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed.
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 && pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                let tok = std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| fmt_err(path, "invalid PGM header"))?;
                let v: usize = tok
                    .parse()
                    .map_err(|_| fmt_err(path, format!("bad PGM header token '{tok}'")))?;
                fields.push(v);
            }
        }
    }
    if fields.len() != 3 {
        return Err(fmt_err(path, "truncated PGM header"));
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(fmt_err(path, "truncated PGM payload"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + n].to_vec(),
    })
}

/// Read an 8-bit grayscale image; the format is picked by file extension.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" => parse_pgm(path, &fs::read(path)?),
        "png" => {
            let img = image::open(path).map_err(|e| fmt_err(path, e))?.into_luma8();
            Ok(GrayImage {
                width: img.width() as usize,
                height: img.height() as usize,
                pixels: img.into_raw(),
            })
        }
        other => Err(fmt_err(path, format!("unsupported image format '{other}'"))),
    }
}

/// Write an 8-bit grayscale image; the format is picked by file extension.
pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    if img.pixels.len() != img.width * img.height {
        return Err(SaltError::Shape(format!(
            "pixel count {} does not match {}x{}",
            img.pixels.len(),
            img.width,
            img.height
        )));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" => {
            let mut f = fs::File::create(path)?;
            write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
            f.write_all(&img.pixels)?;
            Ok(())
        }
        "png" => {
            let buf = image::GrayImage::from_raw(
                img.width as u32,
                img.height as u32,
                img.pixels.clone(),
            )
            .ok_or_else(|| SaltError::Shape("invalid image buffer".into()))?;
            buf.save(path).map_err(|e| fmt_err(path, e))
        }
        other => Err(fmt_err(path, format!("unsupported image format '{other}'"))),
    }
}
