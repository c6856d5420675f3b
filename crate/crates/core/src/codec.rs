//! Binary PPM (`P6`) images and PGM (`P5`) label maps, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap, IGNORE_ID};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (header, payload) = parse_header(bytes, b"P6")?;
    let n = header.width * header.height * 3;
    let data = take_payload(payload, n)?;
    Image::new(header.height, header.width, data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    out
}

/// Decodes a label map, rejecting ids `>= classes` other than the ignore sentinel.
pub fn decode_pgm(bytes: &[u8], classes: usize) -> Result<LabelMap> {
    let (header, payload) = parse_header(bytes, b"P5")?;
    let n = header.width * header.height;
    let data = take_payload(payload, n)?;
    let labels = LabelMap::new(header.height, header.width, data.to_vec())?;
    labels.validate(classes)?;
    Ok(labels)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Header {
    width: usize,
    height: usize,
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(Header, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Codec(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let width = read_field(bytes, &mut pos, "width")?;
    let height = read_field(bytes, &mut pos, "height")?;
    let maxval = read_field(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Codec(format!("unsupported maxval {maxval}, only 255 is accepted")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Codec(format!("degenerate size {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Codec("missing separator after maxval".into())),
    }
    Ok((Header { width, height }, &bytes[pos..]))
}

fn read_field(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Codec(format!("missing {name} in header")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v <= 1 << 20)
        .ok_or_else(|| Error::Codec(format!("bad {name} in header")))
}

fn take_payload(payload: &[u8], n: usize) -> Result<&[u8]> {
    if payload.len() < n {
        return Err(Error::Codec(format!("truncated payload: expected {n} bytes, found {}", payload.len())));
    }
    Ok(&payload[..n])
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| e.in_file(path))
}

pub fn read_pgm(path: &Path, classes: usize) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, classes).map_err(|e| e.in_file(path))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)).map_err(|e| Error::io(path, e))
}

/// Whether a byte is a usable class id for `classes` classes.
pub fn is_valid_label(id: u8, classes: usize) -> bool {
    id == IGNORE_ID || (id as usize) < classes
}
