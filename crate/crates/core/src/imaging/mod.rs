//! RAW mosaic and sRGB image data model, on-disk formats, and the fixed ISP.
//!
//! A [`BayerFrame`] is a single-channel CFA mosaic stored as raw DN values.
//! Everything downstream works on black-level-subtracted, white-normalized
//! samples produced by [`normalize`].

pub(crate) mod isp;
mod ppm;
mod raw_io;

pub use isp::{
    demosaic_half, gamma_decode, gamma_decode_value, gamma_encode, gamma_encode_value,
    render_reference_isp, rgb_to_yuv, white_balance, yuv_to_rgb, WhiteBalance, YuvFrame, LUMA_B,
    LUMA_G, LUMA_R,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use raw_io::{decode_bayer, encode_bayer, load_bayer, write_bayer, HEADER_LEN, MAGIC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("file does not start with the SIEDRAW1 magic")]
    MagicMismatch,
    #[error("payload truncated: expected {expected} samples, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("frame dimensions {width}x{height} are not whole CFA periods")]
    OddDimensions { width: u32, height: u32 },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("crop offset ({x0},{y0}) would shift the CFA phase")]
    PhaseViolation { x0: u32, y0: u32 },
    #[error("crop window {w}x{h} at ({x0},{y0}) exceeds {width}x{height} frame")]
    OutOfBounds {
        x0: u32,
        y0: u32,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("white-balance gains must be positive, got {0:?}")]
    NonPositiveGain([f32; 3]),
    #[error("expected {expected:?} encoding, found {found:?}")]
    WrongEncoding { expected: Encoding, found: Encoding },
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Color filter array phase: the color layout of the top-left 2x2 cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cfa {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

/// Position of a color site within the 2x2 CFA cell, as (row, col).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub red: (usize, usize),
    pub green: [(usize, usize); 2],
    pub blue: (usize, usize),
}

impl Cfa {
    pub fn code(self) -> u8 {
        match self {
            Cfa::Rggb => 0,
            Cfa::Bggr => 1,
            Cfa::Grbg => 2,
            Cfa::Gbrg => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Cfa::Rggb),
            1 => Some(Cfa::Bggr),
            2 => Some(Cfa::Grbg),
            3 => Some(Cfa::Gbrg),
            _ => None,
        }
    }

    pub fn layout(self) -> CellLayout {
        match self {
            Cfa::Rggb => CellLayout {
                red: (0, 0),
                green: [(0, 1), (1, 0)],
                blue: (1, 1),
            },
            Cfa::Bggr => CellLayout {
                red: (1, 1),
                green: [(0, 1), (1, 0)],
                blue: (0, 0),
            },
            Cfa::Grbg => CellLayout {
                red: (0, 1),
                green: [(0, 0), (1, 1)],
                blue: (1, 0),
            },
            Cfa::Gbrg => CellLayout {
                red: (1, 0),
                green: [(0, 0), (1, 1)],
                blue: (0, 1),
            },
        }
    }
}

/// Single-channel RAW mosaic with capture metadata.
///
/// Construct through [`BayerFrame::new`], which enforces the frame
/// invariants; fields are readable but the sample buffer is only handed out
/// immutably.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerFrame {
    width: u32,
    height: u32,
    cfa: Cfa,
    black_level: u16,
    white_level: u16,
    iso: f32,
    exposure_s: f32,
    data: Vec<u16>,
}

/// Capture metadata shared by frames derived from one another.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMeta {
    pub cfa: Cfa,
    pub black_level: u16,
    pub white_level: u16,
    pub iso: f32,
    pub exposure_s: f32,
}

impl BayerFrame {
    pub fn new(
        width: u32,
        height: u32,
        meta: FrameMeta,
        data: Vec<u16>,
    ) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidFrame(format!(
                "empty frame {width}x{height}"
            )));
        }
        if width % 2 != 0 || height % 2 != 0 {
            return Err(ImagingError::OddDimensions { width, height });
        }
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(ImagingError::TruncatedPayload {
                expected,
                found: data.len(),
            });
        }
        if meta.black_level >= meta.white_level {
            return Err(ImagingError::InvalidFrame(format!(
                "black level {} not below white level {}",
                meta.black_level, meta.white_level
            )));
        }
        if !(meta.exposure_s > 0.0 && meta.exposure_s.is_finite()) {
            return Err(ImagingError::InvalidFrame(format!(
                "exposure {} s must be positive",
                meta.exposure_s
            )));
        }
        if !(meta.iso >= 100.0 && meta.iso.is_finite()) {
            return Err(ImagingError::InvalidFrame(format!(
                "iso {} below 100",
                meta.iso
            )));
        }
        if let Some(max) = data.iter().copied().max() {
            if max > meta.white_level {
                return Err(ImagingError::InvalidFrame(format!(
                    "sample {max} exceeds white level {}",
                    meta.white_level
                )));
            }
        }
        Ok(Self {
            width,
            height,
            cfa: meta.cfa,
            black_level: meta.black_level,
            white_level: meta.white_level,
            iso: meta.iso,
            exposure_s: meta.exposure_s,
            data,
        })
    }

    /// Frame filled with a single DN value.
    pub fn filled(width: u32, height: u32, meta: FrameMeta, dn: u16) -> Result<Self, ImagingError> {
        Self::new(
            width,
            height,
            meta,
            vec![dn; width as usize * height as usize],
        )
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cfa(&self) -> Cfa {
        self.cfa
    }

    pub fn black_level(&self) -> u16 {
        self.black_level
    }

    pub fn white_level(&self) -> u16 {
        self.white_level
    }

    pub fn iso(&self) -> f32 {
        self.iso
    }

    pub fn exposure_s(&self) -> f32 {
        self.exposure_s
    }

    pub fn meta(&self) -> FrameMeta {
        FrameMeta {
            cfa: self.cfa,
            black_level: self.black_level,
            white_level: self.white_level,
            iso: self.iso,
            exposure_s: self.exposure_s,
        }
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width as usize + col]
    }

    /// Usable signal range in DN, `white_level - black_level`.
    pub fn dn_range(&self) -> f64 {
        f64::from(self.white_level - self.black_level)
    }

    /// Same geometry and metadata, new samples.
    pub fn with_data(&self, data: Vec<u16>) -> Result<Self, ImagingError> {
        Self::new(self.width, self.height, self.meta(), data)
    }

    /// Same samples with a different ISO tag.
    pub fn with_iso(&self, iso: f32) -> Result<Self, ImagingError> {
        let mut meta = self.meta();
        meta.iso = iso;
        Self::new(self.width, self.height, meta, self.data.clone())
    }
}

/// Normalized value of a single DN sample.
#[inline]
pub fn normalize_dn(dn: u16, black_level: u16, white_level: u16) -> f32 {
    let range = f64::from(white_level - black_level);
    ((f64::from(dn) - f64::from(black_level)) / range).clamp(0.0, 1.0) as f32
}

/// Row-major single-channel f32 plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Black-level subtraction and white normalization into `[0, 1]`.
pub fn normalize(frame: &BayerFrame) -> Plane {
    let (black, white) = (frame.black_level, frame.white_level);
    Plane {
        width: frame.width as usize,
        height: frame.height as usize,
        data: frame
            .data
            .iter()
            .map(|&dn| normalize_dn(dn, black, white))
            .collect(),
    }
}

/// Sub-rectangle of a mosaic. Offsets must be even so the CFA phase of the
/// output matches the input.
pub fn crop(
    frame: &BayerFrame,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
) -> Result<BayerFrame, ImagingError> {
    if x0 % 2 != 0 || y0 % 2 != 0 {
        return Err(ImagingError::PhaseViolation { x0, y0 });
    }
    let fits = x0.checked_add(w).is_some_and(|r| r <= frame.width)
        && y0.checked_add(h).is_some_and(|b| b <= frame.height);
    if !fits {
        return Err(ImagingError::OutOfBounds {
            x0,
            y0,
            w,
            h,
            width: frame.width,
            height: frame.height,
        });
    }
    let stride = frame.width as usize;
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for row in y0 as usize..(y0 + h) as usize {
        let start = row * stride + x0 as usize;
        data.extend_from_slice(&frame.data[start..start + w as usize]);
    }
    BayerFrame::new(w, h, frame.meta(), data)
}

/// Even-aligned origin of a centered `w`x`h` window.
pub fn centered_window(frame: &BayerFrame, w: u32, h: u32) -> Result<(u32, u32), ImagingError> {
    if w > frame.width || h > frame.height {
        return Err(ImagingError::OutOfBounds {
            x0: 0,
            y0: 0,
            w,
            h,
            width: frame.width,
            height: frame.height,
        });
    }
    let x0 = ((frame.width - w) / 2) & !1;
    let y0 = ((frame.height - h) / 2) & !1;
    Ok((x0, y0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    Linear,
    SrgbGamma,
}

/// Three-channel image with row-major RGB triples.
#[derive(Clone, Debug, PartialEq)]
pub struct SrgbFrame {
    pub width: usize,
    pub height: usize,
    pub encoding: Encoding,
    pub data: Vec<[f32; 3]>,
}

impl SrgbFrame {
    pub fn new(
        width: usize,
        height: usize,
        encoding: Encoding,
        data: Vec<[f32; 3]>,
    ) -> Result<Self, ImagingError> {
        if data.len() != width * height {
            return Err(ImagingError::TruncatedPayload {
                expected: width * height,
                found: data.len(),
            });
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ImagingError::InvalidFrame("non-finite component".into()));
        }
        Ok(Self {
            width,
            height,
            encoding,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, encoding: Encoding, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            encoding,
            data: vec![rgb; width * height],
        }
    }

    /// Sub-rectangle of the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self, ImagingError> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(ImagingError::OutOfBounds {
                x0: x0 as u32,
                y0: y0 as u32,
                w: w as u32,
                h: h as u32,
                width: self.width as u32,
                height: self.height as u32,
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for row in y0..y0 + h {
            let start = row * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self {
            width: w,
            height: h,
            encoding: self.encoding,
            data,
        })
    }

    pub(crate) fn require(&self, expected: Encoding) -> Result<(), ImagingError> {
        if self.encoding == expected {
            Ok(())
        } else {
            Err(ImagingError::WrongEncoding {
                expected,
                found: self.encoding,
            })
        }
    }
}
