//! Full-reference quality metrics on [`SrgbFrame`]s, computed in f64 over all
//! three components. PSNR is conventionally taken on gamma-encoded values
//! with peak 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::imaging::SrgbFrame;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const GAUSSIAN_TAPS: usize = 11;
pub const GAUSSIAN_SIGMA: f64 = 1.5;
pub const BLOCK: usize = 8;
pub const LPIPS_UNAVAILABLE: &str = "unavailable";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("image sizes {0:?} and {1:?} differ")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("image {width}x{height} is smaller than the {window}-pixel window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("peak must be positive, got {0}")]
    InvalidPeak(f64),
}

fn same_shape(a: &SrgbFrame, b: &SrgbFrame) -> Result<(), MetricError> {
    if (a.width, a.height) == (b.width, b.height) {
        Ok(())
    } else {
        Err(MetricError::ShapeMismatch(
            (a.width, a.height),
            (b.width, b.height),
        ))
    }
}

/// `10 log10(peak² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &SrgbFrame, b: &SrgbFrame, peak: f64) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(MetricError::InvalidPeak(peak));
    }
    let se: f64 = a
        .data
        .iter()
        .flatten()
        .zip(b.data.iter().flatten())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / (3 * a.data.len()) as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimWindow {
    /// 11-tap Gaussian, σ = 1.5, evaluated at every fully contained position.
    #[default]
    Gaussian,
    /// Non-overlapping 8×8 blocks with uniform weights.
    Block8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimOptions {
    pub window: SsimWindow,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: SsimWindow::Gaussian,
            k1: SSIM_K1,
            k2: SSIM_K2,
            peak: 1.0,
        }
    }
}

/// Normalized 11-tap Gaussian.
pub fn gaussian_taps() -> [f64; GAUSSIAN_TAPS] {
    let mut taps = [0.0; GAUSSIAN_TAPS];
    let mid = (GAUSSIAN_TAPS / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Local SSIM from weighted moments.
#[inline]
pub fn ssim_from_moments(
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
    c1: f64,
    c2: f64,
) -> f64 {
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

fn channel(f: &SrgbFrame, c: usize) -> Vec<f64> {
    f.data.iter().map(|px| px[c] as f64).collect()
}

/// Valid-region separable filter of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean local SSIM over windows and channels.
pub fn ssim(a: &SrgbFrame, b: &SrgbFrame, opts: SsimOptions) -> Result<f64, MetricError> {
    same_shape(a, b)?;
    if !(opts.peak > 0.0) {
        return Err(MetricError::InvalidPeak(opts.peak));
    }
    let side = match opts.window {
        SsimWindow::Gaussian => GAUSSIAN_TAPS,
        SsimWindow::Block8 => BLOCK,
    };
    let (w, h) = (a.width, a.height);
    if w.min(h) < side {
        return Err(MetricError::TooSmall {
            width: w,
            height: h,
            window: side,
        });
    }
    let c1 = (opts.k1 * opts.peak).powi(2);
    let c2 = (opts.k2 * opts.peak).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let (pa, pb) = (channel(a, c), channel(b, c));
        match opts.window {
            SsimWindow::Gaussian => {
                let taps = gaussian_taps();
                let prod =
                    |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
                let mu_a = filter_valid(&pa, w, h, &taps);
                let mu_b = filter_valid(&pb, w, h, &taps);
                let aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
                let bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
                let ab = filter_valid(&prod(&pa, &pb), w, h, &taps);
                for i in 0..mu_a.len() {
                    let (ma, mb) = (mu_a[i], mu_b[i]);
                    total += ssim_from_moments(
                        ma,
                        mb,
                        aa[i] - ma * ma,
                        bb[i] - mb * mb,
                        ab[i] - ma * mb,
                        c1,
                        c2,
                    );
                }
                count += mu_a.len();
            }
            SsimWindow::Block8 => {
                let inv = 1.0 / (BLOCK * BLOCK) as f64;
                for by in 0..h / BLOCK {
                    for bx in 0..w / BLOCK {
                        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for y in by * BLOCK..(by + 1) * BLOCK {
                            for x in bx * BLOCK..(bx + 1) * BLOCK {
                                let (u, v) = (pa[y * w + x], pb[y * w + x]);
                                sa += u;
                                sb += v;
                                saa += u * u;
                                sbb += v * v;
                                sab += u * v;
                            }
                        }
                        let (ma, mb) = (sa * inv, sb * inv);
                        total += ssim_from_moments(
                            ma,
                            mb,
                            saa * inv - ma * ma,
                            sbb * inv - mb * mb,
                            sab * inv - ma * mb,
                            c1,
                            c2,
                        );
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(total / count as f64)
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "nan" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    #[serde(serialize_with = "finite_or_inf")]
    pub mean: f64,
    #[serde(serialize_with = "finite_or_inf")]
    pub median: f64,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
            };
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

/// Per-image metrics plus aggregates. Identical pairs carry PSNR `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub psnr_db: Summary,
    pub ssim: Summary,
    pub lpips: &'static str,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        Self {
            psnr_db: Summary::of(images.iter().map(|m| m.psnr_db)),
            ssim: Summary::of(images.iter().map(|m| m.ssim)),
            images,
            lpips: LPIPS_UNAVAILABLE,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes") + "\n"
    }
}

/// Evaluates `(name, output, reference)` pairs in parallel; result order follows the input.
pub fn evaluate(
    pairs: &[(String, SrgbFrame, SrgbFrame)],
    opts: SsimOptions,
) -> Result<MetricReport, MetricError> {
    let images = pairs
        .par_iter()
        .map(|(name, out, reference)| {
            Ok(ImageMetrics {
                name: name.clone(),
                psnr_db: psnr(out, reference, opts.peak)?,
                ssim: ssim(out, reference, opts)?,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    Ok(MetricReport::from_images(images))
}
