//! Poisson-Gaussian sensor noise: calibration, ISO curves, dark-frame bank,
//! and noise injection.
//!
//! All quantities are in black-level-subtracted DN. Shot noise follows the
//! photon-transfer model `var = K * signal`; read noise is zero-mean Gaussian
//! with standard deviation `sigma_read`. Both are power laws in ISO fitted in
//! log-log space.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::illumination::IlluminanceBand;
use crate::imaging::{load_bayer, write_bayer, BayerFrame, FrameMeta, ImagingError};
use crate::rng::{RngStream, Stage};

/// ISO at which fitted power laws are anchored.
pub const REFERENCE_ISO: f64 = 100.0;
/// Means at or above this use the Gaussian approximation of the Poisson law.
pub const POISSON_GAUSSIAN_SWITCH: f64 = 1000.0;
pub const PTC_BINS: usize = 64;
/// Bins with fewer pixels than this are ignored by the photon-transfer fit.
const MIN_BIN_PIXELS: usize = 8;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("need at least 2 frames, got {0}")]
    InsufficientFrames(usize),
    #[error("calibration frames differ in geometry, ISO or levels")]
    GeometryMismatch,
    #[error("temporal variance is zero everywhere; frames carry no noise")]
    DegenerateVariance,
    #[error("{0} curve needs at least 2 distinct ISO values")]
    SingleIsoPoint(&'static str),
    #[error("{0} curve point ({1}, {2}) must be positive")]
    NonPositivePoint(&'static str, f64, f64),
    #[error("dark-frame bank is empty")]
    EmptyDarkBank,
    #[error("iso {0} must be positive")]
    NegativeIso(f64),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `value(iso) = scale * (iso / 100) ^ exponent`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub scale: f64,
    pub exponent: f64,
}

impl PowerLaw {
    pub fn constant(value: f64) -> Self {
        Self {
            scale: value,
            exponent: 0.0,
        }
    }

    pub fn eval(&self, iso: f64) -> f64 {
        self.scale * (iso / REFERENCE_ISO).powf(self.exponent)
    }

    /// Least-squares line through `(ln(iso/100), ln(value))`.
    pub fn fit(curve: &'static str, points: &[(f64, f64)]) -> Result<Self, NoiseError> {
        for &(iso, v) in points {
            if !(iso > 0.0 && v > 0.0) {
                return Err(NoiseError::NonPositivePoint(curve, iso, v));
            }
        }
        let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(NoiseError::SingleIsoPoint(curve));
        }
        let xs: Vec<f64> = points.iter().map(|p| (p.0 / REFERENCE_ISO).ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
        let (slope, intercept) = least_squares(&xs, &ys, None);
        Ok(Self {
            scale: intercept.exp(),
            exponent: slope,
        })
    }
}

/// Weighted least-squares line `y = slope * x + intercept`.
fn least_squares(xs: &[f64], ys: &[f64], weights: Option<&[f64]>) -> (f64, f64) {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let sw: f64 = (0..xs.len()).map(w).sum();
    let mx = (0..xs.len()).map(|i| w(i) * xs[i]).sum::<f64>() / sw;
    let my = (0..xs.len()).map(|i| w(i) * ys[i]).sum::<f64>() / sw;
    let sxy: f64 = (0..xs.len())
        .map(|i| w(i) * (xs[i] - mx) * (ys[i] - my))
        .sum();
    let sxx: f64 = (0..xs.len()).map(|i| w(i) * (xs[i] - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitCoeffs {
    pub gain: PowerLaw,
    pub read_sigma: PowerLaw,
}

/// Mean-subtracted dark frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DarkResidual {
    pub iso: f64,
    pub width: usize,
    pub height: usize,
    pub meta: FrameMeta,
    /// Mean DN removed at ingestion.
    pub mean: f64,
    pub data: Vec<f32>,
}

impl DarkResidual {
    fn to_frame(&self) -> Result<BayerFrame, ImagingError> {
        let data = self
            .data
            .iter()
            .map(|&r| (f64::from(r) + self.mean).round().clamp(0.0, 65535.0) as u16)
            .collect();
        BayerFrame::new(self.width as u32, self.height as u32, self.meta, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub gain_points: Vec<(f64, f64)>,
    pub read_points: Vec<(f64, f64)>,
    pub fit: FitCoeffs,
    pub dark_bank: Vec<DarkResidual>,
}

impl NoiseModel {
    /// ISO-independent model, mostly for tests and planted data.
    pub fn constant(gain: f64, read_sigma: f64) -> Self {
        Self {
            gain_points: Vec::new(),
            read_points: Vec::new(),
            fit: FitCoeffs {
                gain: PowerLaw::constant(gain),
                read_sigma: PowerLaw::constant(read_sigma),
            },
            dark_bank: Vec::new(),
        }
    }

    /// Shot-noise gain `K` in DN per electron-equivalent.
    pub fn gain(&self, iso: f64) -> f64 {
        self.fit.gain.eval(iso)
    }

    pub fn read_sigma(&self, iso: f64) -> f64 {
        self.fit.read_sigma.eval(iso)
    }

    /// Bank entry with the nearest ISO on a log scale.
    pub fn nearest_dark(&self, iso: f64) -> Option<&DarkResidual> {
        self.dark_bank.iter().min_by(|a, b| {
            (a.iso / iso)
                .ln()
                .abs()
                .total_cmp(&(b.iso / iso).ln().abs())
        })
    }

    /// Writes the model JSON and one SIEDRAW1 file per bank entry next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NoiseError> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("noise");
        let mut dark_bank_paths = Vec::with_capacity(self.dark_bank.len());
        for (i, dark) in self.dark_bank.iter().enumerate() {
            let name = format!("{stem}.dark{i:03}.siedraw");
            write_bayer(&dark.to_frame()?, dir.join(&name))?;
            dark_bank_paths.push(name);
        }
        let doc = NoiseModelDoc {
            gain_points: self.gain_points.iter().map(|&(a, b)| [a, b]).collect(),
            read_points: self.read_points.iter().map(|&(a, b)| [a, b]).collect(),
            fit_coeffs: self.fit,
            dark_bank_paths,
        };
        fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }

    /// Reads a model JSON; relative dark-frame paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, NoiseError> {
        let path = path.as_ref();
        let doc: NoiseModelDoc = serde_json::from_slice(&fs::read(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut model = NoiseModel {
            gain_points: doc.gain_points.iter().map(|p| (p[0], p[1])).collect(),
            read_points: doc.read_points.iter().map(|p| (p[0], p[1])).collect(),
            fit: doc.fit_coeffs,
            dark_bank: Vec::new(),
        };
        for p in &doc.dark_bank_paths {
            let p = PathBuf::from(p);
            let full = if p.is_absolute() { p } else { dir.join(p) };
            model = ingest_dark_frame(model, &load_bayer(full)?);
        }
        Ok(model)
    }
}

/// On-disk form of [`NoiseModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelDoc {
    pub gain_points: Vec<[f64; 2]>,
    pub read_points: Vec<[f64; 2]>,
    pub fit_coeffs: FitCoeffs,
    pub dark_bank_paths: Vec<String>,
}

/// Photon-transfer fit `variance = gain * mean + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonFit {
    pub gain: f64,
    pub offset: f64,
    pub bins_used: usize,
}

fn check_stack(frames: &[BayerFrame]) -> Result<(), NoiseError> {
    if frames.len() < 2 {
        return Err(NoiseError::InsufficientFrames(frames.len()));
    }
    let first = &frames[0];
    let same = frames.iter().all(|f| {
        f.width() == first.width()
            && f.height() == first.height()
            && f.iso() == first.iso()
            && f.black_level() == first.black_level()
    });
    if same {
        Ok(())
    } else {
        Err(NoiseError::GeometryMismatch)
    }
}

/// Per-pixel temporal mean (black subtracted) and unbiased variance.
fn temporal_moments(frames: &[BayerFrame]) -> (Vec<f64>, Vec<f64>) {
    let n = frames.len() as f64;
    let black = f64::from(frames[0].black_level());
    let len = frames[0].len();
    (0..len)
        .into_par_iter()
        .map(|i| {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for f in frames {
                let v = f64::from(f.data()[i]) - black;
                sum += v;
                sq += v * v;
            }
            let mean = sum / n;
            (mean, ((sq - n * mean * mean) / (n - 1.0)).max(0.0))
        })
        .unzip()
}

/// Shot-noise gain from a stack of flats at one ISO.
///
/// Pixels are binned by temporal mean into [`PTC_BINS`] equal-width bins and
/// a count-weighted line is fitted through the per-bin (mean, variance)
/// centroids. The illumination must vary across the frame for the slope to
/// be identifiable. The slope is returned as fitted; it can be slightly
/// negative for noise without a shot component.
pub fn calibrate_poisson_gain(flats: &[BayerFrame]) -> Result<PoissonFit, NoiseError> {
    check_stack(flats)?;
    let (means, vars) = temporal_moments(flats);
    if vars.iter().all(|&v| v == 0.0) {
        return Err(NoiseError::DegenerateVariance);
    }
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / PTC_BINS as f64;
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); PTC_BINS];
    for (&m, &v) in means.iter().zip(&vars) {
        let b = if width > 0.0 {
            (((m - lo) / width) as usize).min(PTC_BINS - 1)
        } else {
            0
        };
        acc[b].0 += 1;
        acc[b].1 += m;
        acc[b].2 += v;
    }
    let populated: Vec<_> = acc.into_iter().filter(|a| a.0 >= MIN_BIN_PIXELS).collect();
    if populated.len() < 2 {
        return Err(NoiseError::DegenerateVariance);
    }
    let xs: Vec<f64> = populated.iter().map(|a| a.1 / a.0 as f64).collect();
    let ys: Vec<f64> = populated.iter().map(|a| a.2 / a.0 as f64).collect();
    let ws: Vec<f64> = populated.iter().map(|a| a.0 as f64).collect();
    let (gain, offset) = least_squares(&xs, &ys, Some(&ws));
    Ok(PoissonFit {
        gain,
        offset,
        bins_used: populated.len(),
    })
}

/// Read-noise sigma from a stack of dark frames at one ISO.
pub fn calibrate_gaussian(darks: &[BayerFrame]) -> Result<f64, NoiseError> {
    check_stack(darks)?;
    let (_, vars) = temporal_moments(darks);
    Ok((vars.iter().sum::<f64>() / vars.len() as f64).sqrt())
}

/// Builds a model from per-ISO calibration points.
pub fn fit_iso_model(
    gain_points: &[(f64, f64)],
    read_points: &[(f64, f64)],
) -> Result<NoiseModel, NoiseError> {
    Ok(NoiseModel {
        gain_points: gain_points.to_vec(),
        read_points: read_points.to_vec(),
        fit: FitCoeffs {
            gain: PowerLaw::fit("gain", gain_points)?,
            read_sigma: PowerLaw::fit("read sigma", read_points)?,
        },
        dark_bank: Vec::new(),
    })
}

/// Stores the mean-subtracted residual of a dark frame in the bank.
pub fn ingest_dark_frame(mut model: NoiseModel, frame: &BayerFrame) -> NoiseModel {
    let mean = frame.data().iter().map(|&d| f64::from(d)).sum::<f64>() / frame.len() as f64;
    let data = frame
        .data()
        .iter()
        .map(|&d| (f64::from(d) - mean) as f32)
        .collect();
    model.dark_bank.push(DarkResidual {
        iso: f64::from(frame.iso()),
        width: frame.width() as usize,
        height: frame.height() as usize,
        meta: frame.meta(),
        mean,
        data,
    });
    model
}

/// Full calibration from flats and darks captured at several ISOs.
///
/// Frames are grouped by their ISO tag. Every ISO with at least two flats
/// yields a gain point and every ISO with at least two darks a read-noise
/// point; the first dark of each ISO joins the residual bank.
pub fn calibrate_from_frames(
    flats: &[BayerFrame],
    darks: &[BayerFrame],
) -> Result<NoiseModel, NoiseError> {
    fn group(frames: &[BayerFrame]) -> BTreeMap<u32, Vec<BayerFrame>> {
        let mut map: BTreeMap<u32, Vec<BayerFrame>> = BTreeMap::new();
        for f in frames {
            map.entry(f.iso().to_bits()).or_default().push(f.clone());
        }
        map
    }
    let mut gain_points = Vec::new();
    for stack in group(flats).values() {
        let fit = calibrate_poisson_gain(stack)?;
        gain_points.push((f64::from(stack[0].iso()), fit.gain));
    }
    let dark_groups = group(darks);
    let mut read_points = Vec::new();
    for stack in dark_groups.values() {
        read_points.push((f64::from(stack[0].iso()), calibrate_gaussian(stack)?));
    }
    let mut model = fit_iso_model(&gain_points, &read_points)?;
    for stack in dark_groups.values() {
        model = ingest_dark_frame(model, &stack[0]);
    }
    Ok(model)
}

/// Uniform draw on the band's equivalent ISO interval.
pub fn draw_iso<R: Rng + ?Sized>(band: IlluminanceBand, rng: &mut R) -> f64 {
    let (lo, hi) = band.iso_range();
    rng.random_range(lo..=hi)
}

/// Poisson sample; Gaussian approximation for large means.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean >= POISSON_GAUSSIAN_SWITCH {
        let z: f64 = rng.sample(StandardNormal);
        return mean + mean.sqrt() * z;
    }
    Poisson::new(mean)
        .expect("finite positive mean")
        .sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct NoiseOptions {
    /// Add a residual patch from the dark-frame bank.
    pub dark_bank: bool,
}

/// A residual patch from the dark-frame bank, scaled to the target ISO.
///
/// Even offsets keep the residual's CFA phase aligned with the frame; the
/// patch wraps at the bank frame's edges.
struct DarkPatch<'a> {
    bank: &'a DarkResidual,
    scale: f64,
    ox: usize,
    oy: usize,
}

impl<'a> DarkPatch<'a> {
    fn select(
        model: &'a NoiseModel,
        iso: f64,
        rng: RngStream,
        opts: NoiseOptions,
    ) -> Result<Option<Self>, NoiseError> {
        if !opts.dark_bank {
            return Ok(None);
        }
        let bank = model.nearest_dark(iso).ok_or(NoiseError::EmptyDarkBank)?;
        let bank_sigma = model.read_sigma(bank.iso);
        let scale = if bank_sigma > 0.0 {
            model.read_sigma(iso).max(0.0) / bank_sigma
        } else {
            1.0
        };
        let mut r = rng.stage(Stage::DarkPatch).rng();
        let ox = 2 * r.random_range(0..bank.width.div_ceil(2));
        let oy = 2 * r.random_range(0..bank.height.div_ceil(2));
        Ok(Some(Self {
            bank,
            scale,
            ox,
            oy,
        }))
    }

    #[inline]
    fn at(&self, row: usize, col: usize) -> f64 {
        let y = (row + self.oy) % self.bank.height;
        let x = (col + self.ox) % self.bank.width;
        self.scale * f64::from(self.bank.data[y * self.bank.width + x])
    }
}

/// Below this mean the frozen sampler inverts the Poisson CDF exactly.
const FROZEN_EXACT_POISSON: f64 = 64.0;
const GUIDE_SLOTS: usize = 64;

/// Noise variates frozen at a fixed set of pixel sites.
///
/// [`FrozenNoise::apply`] maps a clean DN at a site to a noisy DN using the
/// same uniform and normal variates on every call, so an objective that
/// re-noises many candidate frames compares them under common random numbers.
/// Shot noise inverts the Poisson CDF for small means and uses the Gaussian
/// approximation above [`FROZEN_EXACT_POISSON`] electrons.
#[derive(Clone, Debug)]
pub struct FrozenNoise {
    gain: f64,
    black: f64,
    white: f64,
    /// Poisson CDF rows, one per integer DN offset whose mean is below the
    /// exact threshold, concatenated; row `r` spans `starts[r]..starts[r + 1]`.
    cdfs: Vec<f64>,
    starts: Vec<usize>,
    /// Per row, `GUIDE_SLOTS + 1` starting points for the inversion scan.
    guide: Vec<u32>,
    uniforms: Vec<f64>,
    shot_normals: Vec<f64>,
    /// Read noise plus dark residual, in DN.
    additive: Vec<f64>,
}

impl FrozenNoise {
    /// `sites` are `(row, col)` positions in `frame`.
    pub fn new(
        frame: &BayerFrame,
        sites: &[(usize, usize)],
        iso: f64,
        model: &NoiseModel,
        rng: RngStream,
        opts: NoiseOptions,
    ) -> Result<Self, NoiseError> {
        if !(iso > 0.0 && iso.is_finite()) {
            return Err(NoiseError::NegativeIso(iso));
        }
        let sigma = model.read_sigma(iso).max(0.0);
        let dark = DarkPatch::select(model, iso, rng, opts)?;
        let mut r = rng.stage(Stage::SearchNoise).rng();
        let mut uniforms = Vec::with_capacity(sites.len());
        let mut shot_normals = Vec::with_capacity(sites.len());
        let mut additive = Vec::with_capacity(sites.len());
        for &(row, col) in sites {
            uniforms.push(r.random::<f64>());
            shot_normals.push(r.sample::<f64, _>(StandardNormal));
            let z: f64 = r.sample(StandardNormal);
            additive.push(sigma * z + dark.as_ref().map_or(0.0, |d| d.at(row, col)));
        }
        let gain = model.gain(iso).max(0.0);
        let exact_offsets = if gain > 0.0 {
            ((FROZEN_EXACT_POISSON * gain).ceil() as usize)
                .min(usize::from(frame.white_level()) + 1)
        } else {
            0
        };
        let mut cdfs = Vec::new();
        let mut starts = vec![0];
        let mut guide = Vec::with_capacity(exact_offsets * (GUIDE_SLOTS + 1));
        for offset in 0..exact_offsets {
            let row = poisson_cdf(offset as f64 / gain);
            for j in 0..=GUIDE_SLOTS {
                let u = j as f64 / GUIDE_SLOTS as f64;
                guide.push(row.partition_point(|&c| c < u).min(row.len() - 1) as u32);
            }
            cdfs.extend_from_slice(&row);
            starts.push(cdfs.len());
        }
        Ok(Self {
            gain,
            cdfs,
            starts,
            guide,
            black: f64::from(frame.black_level()),
            white: f64::from(frame.white_level()),
            uniforms,
            shot_normals,
            additive,
        })
    }

    pub fn len(&self) -> usize {
        self.uniforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uniforms.is_empty()
    }

    /// Smallest `k` with `cdf[k] >= u` in the row for `offset`, scanning from
    /// the guide entry for `u`'s slot.
    #[inline]
    fn poisson_quantile(&self, offset: usize, u: f64) -> f64 {
        let row = &self.cdfs[self.starts[offset]..self.starts[offset + 1]];
        let slot = ((u * GUIDE_SLOTS as f64) as usize).min(GUIDE_SLOTS);
        let mut k = self.guide[offset * (GUIDE_SLOTS + 1) + slot] as usize;
        while k + 1 < row.len() && row[k] < u {
            k += 1;
        }
        k as f64
    }

    /// Noisy DN for clean value `dn` at site `i`.
    #[inline]
    pub fn apply(&self, i: usize, dn: u16) -> u16 {
        let offset = f64::from(dn) - self.black;
        let signal = offset.max(0.0);
        let shot = if self.gain > 0.0 && signal > 0.0 {
            let lambda = signal / self.gain;
            let offset = signal as usize;
            let k = if offset + 1 < self.starts.len() {
                self.poisson_quantile(offset, self.uniforms[i])
            } else {
                (lambda + lambda.sqrt() * self.shot_normals[i]).round()
            };
            self.gain * k - signal
        } else {
            0.0
        };
        let value = self.black + offset + shot + self.additive[i];
        value.round_ties_even().clamp(0.0, self.white) as u16
    }
}

/// `P(X <= k)` for `X ~ Poisson(lambda)`, up to where the tail is below 1e-15.
fn poisson_cdf(lambda: f64) -> Vec<f64> {
    let mut p = (-lambda).exp();
    let mut cdf = vec![p];
    let mut k = 0.0;
    while 1.0 - cdf[cdf.len() - 1] > 1e-15 && p > 0.0 {
        k += 1.0;
        p *= lambda / k;
        cdf.push(cdf[cdf.len() - 1] + p);
    }
    cdf
}

/// Adds shot, read and dark-residual noise to a clean frame.
///
/// Each row draws from its own stream derived from `rng`, so the result is a
/// pure function of the inputs regardless of thread count.
pub fn add_noise(
    clean: &BayerFrame,
    iso: f64,
    model: &NoiseModel,
    rng: RngStream,
    opts: NoiseOptions,
) -> Result<BayerFrame, NoiseError> {
    if !(iso > 0.0 && iso.is_finite()) {
        return Err(NoiseError::NegativeIso(iso));
    }
    let gain = model.gain(iso).max(0.0);
    let sigma = model.read_sigma(iso).max(0.0);
    let dark = DarkPatch::select(model, iso, rng, opts)?;
    let black = f64::from(clean.black_level());
    let white = f64::from(clean.white_level());
    let width = clean.width() as usize;

    let shot_stream = rng.stage(Stage::ShotRead);
    let mut data = vec![0u16; clean.len()];
    data.par_chunks_mut(width)
        .enumerate()
        .for_each(|(row, out)| {
            let mut r = shot_stream.derive(row as u64).rng();
            let src = &clean.data()[row * width..(row + 1) * width];
            for (col, (o, &dn)) in out.iter_mut().zip(src).enumerate() {
                let offset = f64::from(dn) - black;
                let signal = offset.max(0.0);
                let shot = if gain > 0.0 && signal > 0.0 {
                    gain * sample_poisson(&mut r, signal / gain) - signal
                } else {
                    0.0
                };
                let read = if sigma > 0.0 {
                    let z: f64 = r.sample(StandardNormal);
                    sigma * z
                } else {
                    0.0
                };
                let residual = dark.as_ref().map_or(0.0, |d| d.at(row, col));
                let value = black + offset + shot + read + residual;
                *o = value.round_ties_even().clamp(0.0, white) as u16;
            }
        });
    let mut meta = clean.meta();
    meta.iso = iso as f32;
    Ok(BayerFrame::new(clean.width(), clean.height(), meta, data)?)
}
