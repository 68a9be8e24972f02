//! Binary netpbm: `P5` grayscale (8 or 16 bit, big-endian) and `P6` RGB.
//!
//! Writers emit `P5 <W> <H> <maxval>\n`; readers accept any whitespace and
//! `#` comments in the header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image<P> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<P>,
}

pub type Gray8 = Image<u8>;
pub type Gray16 = Image<u16>;
/// Interleaved `RGBRGB...` samples.
pub type Rgb8 = Image<u8>;

impl<P: Copy> Image<P> {
    pub fn new(width: usize, height: usize, data: Vec<P>) -> Self {
        Image { width, height, data }
    }
}

fn header(magic: &str, w: usize, h: usize, maxval: u32) -> Vec<u8> {
    format!("{magic} {w} {h} {maxval}\n").into_bytes()
}

pub fn encode_pgm8(img: &Gray8) -> Vec<u8> {
    let mut out = header("P5", img.width, img.height, 255);
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm16(img: &Gray16) -> Vec<u8> {
    let mut out = header("P5", img.width, img.height, 65535);
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = header("P6", img.width, img.height, 255);
    out.extend_from_slice(&img.data);
    out
}

/// Parsed header: magic, width, height, maxval, offset of the first sample.
fn parse_header(b: &[u8]) -> std::result::Result<(&str, usize, usize, u32, usize), String> {
    if b.len() < 2 || b[0] != b'P' || !(b[1] == b'5' || b[1] == b'6') {
        return Err("not a binary PGM/PPM (expected P5 or P6)".into());
    }
    let magic = if b[1] == b'5' { "P5" } else { "P6" };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for f in fields.iter_mut() {
        loop {
            match b.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while b.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while b.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header".into());
        }
        *f = std::str::from_utf8(&b[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header number out of range")?;
    }
    if !b.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("header must end with one whitespace byte".into());
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad header values {w}x{h} maxval {maxval}"));
    }
    Ok((magic, w as usize, h as usize, maxval as u32, pos + 1))
}

fn samples(b: &[u8], n: usize, maxval: u32) -> std::result::Result<Vec<u16>, String> {
    let bytes = if maxval > 255 { 2 } else { 1 };
    if b.len() != n * bytes {
        return Err(format!("expected {} data bytes, found {}", n * bytes, b.len()));
    }
    Ok(if bytes == 2 {
        b.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        b.iter().map(|&v| v as u16).collect()
    })
}

/// Grayscale samples at their stored depth, with the maxval.
pub fn decode_pgm(b: &[u8]) -> std::result::Result<(Gray16, u32), String> {
    let (magic, w, h, maxval, off) = parse_header(b)?;
    if magic != "P5" {
        return Err(format!("expected P5, found {magic}"));
    }
    Ok((Image::new(w, h, samples(&b[off..], w * h, maxval)?), maxval))
}

pub fn decode_ppm(b: &[u8]) -> std::result::Result<Rgb8, String> {
    let (magic, w, h, maxval, off) = parse_header(b)?;
    if magic != "P6" || maxval > 255 {
        return Err(format!("expected 8-bit P6, found {magic} maxval {maxval}"));
    }
    let data = samples(&b[off..], 3 * w * h, maxval)?;
    Ok(Image::new(w, h, data.into_iter().map(|v| v as u8).collect()))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(crate::error::io_err(path))
}

fn fmt_err(path: &Path) -> impl FnOnce(String) -> Error + '_ {
    move |msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    }
}

/// Reads 8- or 16-bit grayscale as 16-bit samples.
pub fn read_pgm(path: &Path) -> Result<Gray16> {
    decode_pgm(&read(path)?).map(|(img, _)| img).map_err(fmt_err(path))
}

pub fn read_pgm8(path: &Path) -> Result<Gray8> {
    let (img, maxval) = decode_pgm(&read(path)?).map_err(fmt_err(path))?;
    if maxval > 255 {
        return Err(fmt_err(path)(format!("expected 8-bit PGM, found maxval {maxval}")));
    }
    Ok(Image::new(img.width, img.height, img.data.into_iter().map(|v| v as u8).collect()))
}

pub fn read_ppm(path: &Path) -> Result<Rgb8> {
    decode_ppm(&read(path)?).map_err(fmt_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(crate::error::io_err(path))
}

pub fn write_pgm8(path: &Path, img: &Gray8) -> Result<()> {
    write(path, &encode_pgm8(img))
}

pub fn write_pgm16(path: &Path, img: &Gray16) -> Result<()> {
    write(path, &encode_pgm16(img))
}

pub fn write_ppm(path: &Path, img: &Rgb8) -> Result<()> {
    write(path, &encode_ppm(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let g8 = Image::new(3, 2, vec![0u8, 1, 2, 253, 254, 255]);
        let b = encode_pgm8(&g8);
        assert!(b.starts_with(b"P5 3 2 255\n"));
        assert_eq!(decode_pgm(&b).unwrap().0.data, vec![0, 1, 2, 253, 254, 255]);

        let g16 = Image::new(2, 2, vec![0u16, 1000, 65535, 256]);
        let b = encode_pgm16(&g16);
        assert!(b.starts_with(b"P5 2 2 65535\n"));
        assert_eq!(&b[13..15], &[0x00, 0x00]);
        assert_eq!(&b[15..17], &1000u16.to_be_bytes());
        assert_eq!(decode_pgm(&b).unwrap(), (g16, 65535));

        let rgb = Image::new(1, 2, vec![1u8, 2, 3, 4, 5, 6]);
        assert_eq!(decode_ppm(&encode_ppm(&rgb)).unwrap(), rgb);
    }

    #[test]
    fn header_comments() {
        let b = b"P5\n# made by hand\n2 1\n255\n\x07\x08";
        assert_eq!(decode_pgm(b).unwrap().0.data, vec![7, 8]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_pgm(b"P2 1 1 255\n0").is_err());
        assert!(decode_pgm(b"P5 2 2 255\n\x00").is_err());
        assert!(decode_pgm(b"P5 2 x 255\n\x00").is_err());
        assert!(decode_ppm(&encode_pgm8(&Image::new(1, 1, vec![0]))).is_err());
    }
}
