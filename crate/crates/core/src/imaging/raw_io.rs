// SIEDRAW1 container, little-endian:
//
//   offset size  field
//   0      8     magic "SIEDRAW1"
//   8      4     width (u32)
//   12     4     height (u32)
//   16     1     cfa code (0=RGGB, 1=BGGR, 2=GRBG, 3=GBRG)
//   17     3     padding, zero
//   20     2     black level (u16)
//   22     2     white level (u16)
//   24     4     iso (f32)
//   28     4     exposure in seconds (f32)
//   32     2*w*h row-major u16 samples

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BayerFrame, Cfa, FrameMeta, ImagingError};

pub const MAGIC: &[u8; 8] = b"SIEDRAW1";
pub const HEADER_LEN: usize = 32;

pub fn encode_bayer(frame: &BayerFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * frame.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&frame.width().to_le_bytes());
    out.extend_from_slice(&frame.height().to_le_bytes());
    out.push(frame.cfa().code());
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&frame.black_level().to_le_bytes());
    out.extend_from_slice(&frame.white_level().to_le_bytes());
    out.extend_from_slice(&frame.iso().to_le_bytes());
    out.extend_from_slice(&frame.exposure_s().to_le_bytes());
    for &s in frame.data() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_bayer(bytes: &[u8]) -> Result<BayerFrame, ImagingError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ImagingError::MagicMismatch);
    }
    if bytes.len() < HEADER_LEN {
        return Err(ImagingError::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());

    let width = u32_at(8);
    let height = u32_at(12);
    let cfa = Cfa::from_code(bytes[16])
        .ok_or_else(|| ImagingError::InvalidFrame(format!("unknown cfa code {}", bytes[16])))?;
    let meta = FrameMeta {
        cfa,
        black_level: u16_at(20),
        white_level: u16_at(22),
        iso: f32_at(24),
        exposure_s: f32_at(28),
    };
    if width % 2 != 0 || height % 2 != 0 {
        return Err(ImagingError::OddDimensions { width, height });
    }
    let expected = width as usize * height as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 2 * expected {
        return Err(ImagingError::TruncatedPayload {
            expected,
            found: payload.len() / 2,
        });
    }
    let data = payload[..2 * expected]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    BayerFrame::new(width, height, meta, data)
}

pub fn load_bayer(path: impl AsRef<Path>) -> Result<BayerFrame, ImagingError> {
    decode_bayer(&fs::read(path)?)
}

pub fn write_bayer(frame: &BayerFrame, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_bayer(frame))?;
    Ok(())
}
