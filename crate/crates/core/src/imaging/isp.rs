//! Fixed ISP: half-resolution demosaic, white balance, sRGB transfer, BT.601.
//!
//! The scalar helpers are shared with the luma-histogram fast path in
//! `illumination`, so both routes produce bit-identical luma values.

use serde::{Deserialize, Serialize};

use super::{normalize_dn, BayerFrame, Encoding, ImagingError, SrgbFrame};

pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

/// Per-channel white-balance gains, all strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 3]", into = "[f32; 3]")]
pub struct WhiteBalance([f32; 3]);

impl WhiteBalance {
    pub const UNIT: WhiteBalance = WhiteBalance([1.0, 1.0, 1.0]);

    pub fn new(gains: [f32; 3]) -> Result<Self, ImagingError> {
        if gains.iter().all(|g| *g > 0.0 && g.is_finite()) {
            Ok(Self(gains))
        } else {
            Err(ImagingError::NonPositiveGain(gains))
        }
    }

    pub fn gains(self) -> [f32; 3] {
        self.0
    }
}

impl Default for WhiteBalance {
    fn default() -> Self {
        Self::UNIT
    }
}

impl TryFrom<[f32; 3]> for WhiteBalance {
    type Error = ImagingError;
    fn try_from(g: [f32; 3]) -> Result<Self, Self::Error> {
        Self::new(g)
    }
}

impl From<WhiteBalance> for [f32; 3] {
    fn from(wb: WhiteBalance) -> Self {
        wb.0
    }
}

/// Normalized mean of two green sites. Equal to the mean of the two
/// normalized values; computed from the DN sum so it depends on the pair
/// only through that sum.
#[inline]
pub(crate) fn green_mean(g1: u16, g2: u16, black: u16, white: u16) -> f32 {
    green_from_sum(
        u32::from(g1.max(black)) + u32::from(g2.max(black)),
        black,
        white,
    )
}

#[inline]
pub(crate) fn green_from_sum(clamped_sum: u32, black: u16, white: u16) -> f32 {
    let range = f64::from(white - black);
    ((f64::from(clamped_sum) * 0.5 - f64::from(black)) / range).clamp(0.0, 1.0) as f32
}

#[inline]
pub(crate) fn apply_gain(v: f32, gain: f32) -> f32 {
    (v * gain).clamp(0.0, 1.0)
}

/// IEC 61966-2-1 forward transfer.
#[inline]
pub fn gamma_encode_value(x: f32) -> f32 {
    let x = f64::from(x).clamp(0.0, 1.0);
    let y = if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    };
    y.clamp(0.0, 1.0) as f32
}

#[inline]
pub fn gamma_decode_value(y: f32) -> f32 {
    let y = f64::from(y).clamp(0.0, 1.0);
    let x = if y <= 0.040_45 {
        y / 12.92
    } else {
        ((y + 0.055) / 1.055).powf(2.4)
    };
    x.clamp(0.0, 1.0) as f32
}

#[inline]
pub(crate) fn luma(rgb: [f32; 3]) -> f32 {
    (LUMA_R * f64::from(rgb[0]) + LUMA_G * f64::from(rgb[1]) + LUMA_B * f64::from(rgb[2])) as f32
}

/// Half-resolution demosaic: one RGB pixel per 2x2 CFA cell.
pub fn demosaic_half(frame: &BayerFrame) -> SrgbFrame {
    let (w, h) = (frame.width() as usize / 2, frame.height() as usize / 2);
    let (black, white) = (frame.black_level(), frame.white_level());
    let layout = frame.cfa().layout();
    let mut data = Vec::with_capacity(w * h);
    for cy in 0..h {
        for cx in 0..w {
            let at = |(r, c): (usize, usize)| frame.at(2 * cy + r, 2 * cx + c);
            let red = normalize_dn(at(layout.red), black, white);
            let green = green_mean(at(layout.green[0]), at(layout.green[1]), black, white);
            let blue = normalize_dn(at(layout.blue), black, white);
            data.push([red, green, blue]);
        }
    }
    SrgbFrame {
        width: w,
        height: h,
        encoding: Encoding::Linear,
        data,
    }
}

pub fn white_balance(img: &SrgbFrame, gains: [f32; 3]) -> Result<SrgbFrame, ImagingError> {
    let g = WhiteBalance::new(gains)?.gains();
    img.require(Encoding::Linear)?;
    let data = img
        .data
        .iter()
        .map(|p| {
            [
                apply_gain(p[0], g[0]),
                apply_gain(p[1], g[1]),
                apply_gain(p[2], g[2]),
            ]
        })
        .collect();
    Ok(SrgbFrame {
        data,
        ..img.clone()
    })
}

pub fn gamma_encode(img: &SrgbFrame) -> Result<SrgbFrame, ImagingError> {
    img.require(Encoding::Linear)?;
    let data = img.data.iter().map(|p| p.map(gamma_encode_value)).collect();
    Ok(SrgbFrame {
        width: img.width,
        height: img.height,
        encoding: Encoding::SrgbGamma,
        data,
    })
}

pub fn gamma_decode(img: &SrgbFrame) -> Result<SrgbFrame, ImagingError> {
    img.require(Encoding::SrgbGamma)?;
    let data = img.data.iter().map(|p| p.map(gamma_decode_value)).collect();
    Ok(SrgbFrame {
        width: img.width,
        height: img.height,
        encoding: Encoding::Linear,
        data,
    })
}

/// Planar full-range YUV.
#[derive(Clone, Debug, PartialEq)]
pub struct YuvFrame {
    pub width: usize,
    pub height: usize,
    pub y: Vec<f32>,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

// Chroma scale factors follow from the luma weights: U = (B - Y) / KU, V = (R - Y) / KV.
const KU: f64 = 2.0 * (1.0 - LUMA_B);
const KV: f64 = 2.0 * (1.0 - LUMA_R);

/// BT.601 full-range conversion of a gamma-encoded image.
pub fn rgb_to_yuv(img: &SrgbFrame) -> Result<YuvFrame, ImagingError> {
    img.require(Encoding::SrgbGamma)?;
    let n = img.data.len();
    let (mut y, mut u, mut v) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for p in &img.data {
        let luma_value = luma(*p);
        let yy = f64::from(luma_value);
        y.push(luma_value);
        u.push(((f64::from(p[2]) - yy) / KU) as f32);
        v.push(((f64::from(p[0]) - yy) / KV) as f32);
    }
    Ok(YuvFrame {
        width: img.width,
        height: img.height,
        y,
        u,
        v,
    })
}

/// Inverse of [`rgb_to_yuv`], producing a gamma-encoded image (unclamped).
pub fn yuv_to_rgb(yuv: &YuvFrame) -> SrgbFrame {
    let data = (0..yuv.y.len())
        .map(|i| {
            let (y, u, v) = (
                f64::from(yuv.y[i]),
                f64::from(yuv.u[i]),
                f64::from(yuv.v[i]),
            );
            let r = y + KV * v;
            let b = y + KU * u;
            let g = (y - LUMA_R * r - LUMA_B * b) / LUMA_G;
            [r as f32, g as f32, b as f32]
        })
        .collect();
    SrgbFrame {
        width: yuv.width,
        height: yuv.height,
        encoding: Encoding::SrgbGamma,
        data,
    }
}

/// demosaic_half, then white balance, then sRGB gamma.
pub fn render_reference_isp(
    frame: &BayerFrame,
    gains: [f32; 3],
) -> Result<SrgbFrame, ImagingError> {
    gamma_encode(&white_balance(&demosaic_half(frame), gains)?)
}
