//! Binary PPM (P6, 8-bit) for gamma-encoded sRGB images.

use std::fs;
use std::path::Path;

use super::{Encoding, ImagingError, SrgbFrame};

pub fn encode_ppm(img: &SrgbFrame) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + 3 * img.data.len());
    out.extend_from_slice(header.as_bytes());
    for p in &img.data {
        for &v in p {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImagingError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImagingError::Ppm("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_num(tok: &[u8]) -> Result<usize, ImagingError> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            ImagingError::Ppm(format!(
                "bad header number {:?}",
                String::from_utf8_lossy(tok)
            ))
        })
}

/// Decodes a P6 image into a gamma-encoded frame with components in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<SrgbFrame, ImagingError> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P6" {
        return Err(ImagingError::Ppm("not a binary P6 file".into()));
    }
    let width = parse_num(next_token(bytes, &mut pos)?)?;
    let height = parse_num(next_token(bytes, &mut pos)?)?;
    let maxval = parse_num(next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(ImagingError::Ppm(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * width * height;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or(ImagingError::TruncatedPayload {
            expected: width * height,
            found: bytes.len().saturating_sub(pos) / 3,
        })?;
    let scale = maxval as f32;
    let data = raster
        .chunks_exact(3)
        .map(|c| {
            [
                f32::from(c[0]) / scale,
                f32::from(c[1]) / scale,
                f32::from(c[2]) / scale,
            ]
        })
        .collect();
    SrgbFrame::new(width, height, Encoding::SrgbGamma, data)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<SrgbFrame, ImagingError> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(img: &SrgbFrame, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    img.require(Encoding::SrgbGamma)?;
    fs::write(path, encode_ppm(img))?;
    Ok(())
}
