//! Exposure statistic, exposure alignment, luma histograms and the η search.
//!
//! Alignment scales every black-level-subtracted sample of the captured
//! frame by `expo(standard) / expo(cap) + eta`. The scale factor `eta` is
//! found by minimizing the KL divergence between the Y-channel histograms of
//! the aligned frame and the standard frame.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    gamma_encode_value,
    isp::{apply_gain, green_from_sum},
    normalize_dn, BayerFrame, ImagingError, WhiteBalance, LUMA_B, LUMA_G, LUMA_R,
};

pub const DEFAULT_BINS: usize = 256;
pub const DEFAULT_KL_TAU: f64 = 1e-8;
/// Table 1 bound on the mean illumination-histogram KL.
pub const KL_THRESHOLD: f64 = 0.06;
/// Fraction of clamped samples above which an alignment is flagged.
pub const SATURATION_WARN_FRACTION: f64 = 0.01;
pub const GOLDEN_ITERATIONS: usize = 64;
const GRID_PROBES: usize = 17;

#[derive(Debug, Error)]
pub enum IlluminationError {
    #[error("captured frame has zero exposure; cannot align")]
    ZeroExposureInput,
    #[error("target exposure {0} must be positive and finite")]
    InvalidTarget(f64),
    #[error("histograms have {0} and {1} bins")]
    BinMismatch(usize, usize),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("cannot histogram an empty frame")]
    EmptyFrame,
    #[error("KL smoothing constant must be positive, got {0}")]
    InvalidTau(f64),
    #[error("η search diverged: KL was non-finite at every probe")]
    SearchDiverged,
    #[error("unknown illuminance band {0:?} (expected 1e-2, 1e-3 or 1e-4)")]
    UnknownBand(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// The three target illuminance ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum IlluminanceBand {
    /// 0.01 to 0.1 lux
    Band1e2,
    /// 0.001 to 0.01 lux
    Band1e3,
    /// 0.0001 to 0.001 lux
    Band1e4,
}

impl IlluminanceBand {
    pub const ALL: [IlluminanceBand; 3] = [
        IlluminanceBand::Band1e2,
        IlluminanceBand::Band1e3,
        IlluminanceBand::Band1e4,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            IlluminanceBand::Band1e2 => "1e-2",
            IlluminanceBand::Band1e3 => "1e-3",
            IlluminanceBand::Band1e4 => "1e-4",
        }
    }

    pub fn lux_range(self) -> (f64, f64) {
        match self {
            IlluminanceBand::Band1e2 => (0.01, 0.1),
            IlluminanceBand::Band1e3 => (0.001, 0.01),
            IlluminanceBand::Band1e4 => (0.0001, 0.001),
        }
    }

    /// Equivalent ISO interval used for noise injection.
    pub fn iso_range(self) -> (f64, f64) {
        match self {
            IlluminanceBand::Band1e2 | IlluminanceBand::Band1e3 => (100.0, 20_000.0),
            IlluminanceBand::Band1e4 => (100.0, 40_000.0),
        }
    }

    /// Mean normalized exposure of a tool-generated surrogate standard: the
    /// band's geometric-mean illuminance under unit sensitivity.
    pub fn surrogate_expo(self) -> f64 {
        let (lo, hi) = self.lux_range();
        (lo * hi).sqrt()
    }
}

impl fmt::Display for IlluminanceBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for IlluminanceBand {
    type Err = IlluminationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IlluminanceBand::ALL
            .into_iter()
            .find(|b| b.tag() == s)
            .ok_or_else(|| IlluminationError::UnknownBand(s.to_string()))
    }
}

impl TryFrom<String> for IlluminanceBand {
    type Error = IlluminationError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<IlluminanceBand> for String {
    fn from(b: IlluminanceBand) -> Self {
        b.tag().to_string()
    }
}

/// Mean of the normalized mosaic, all CFA channels together.
pub fn expo(frame: &BayerFrame) -> f64 {
    let (black, white) = (frame.black_level(), frame.white_level());
    let sum: f64 = frame
        .data()
        .iter()
        .map(|&dn| f64::from(normalize_dn(dn, black, white)))
        .sum();
    sum / frame.len() as f64
}

/// Result of [`align_exposure`].
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub frame: BayerFrame,
    /// Applied factor, `target / expo(cap) + eta`.
    pub scale: f64,
    /// Fraction of samples clamped at the white level.
    pub saturated_fraction: f64,
}

impl Alignment {
    pub fn saturation_warning(&self) -> bool {
        self.saturated_fraction > SATURATION_WARN_FRACTION
    }
}

/// DN remapping for one scale factor: `lut[dn]` is the aligned sample.
/// Re-quantization rounds half to even.
pub fn scale_lut(black: u16, white: u16, scale: f64) -> Vec<u16> {
    let range = f64::from(white - black);
    (0..=white)
        .map(|dn| {
            let v = (f64::from(normalize_dn(dn, black, white)) * scale).clamp(0.0, 1.0);
            black + (v * range).round_ties_even() as u16
        })
        .collect()
}

/// Applies a raw multiplicative factor to the normalized samples.
pub fn apply_scale(cap: &BayerFrame, scale: f64) -> Result<Alignment, IlluminationError> {
    let (black, white) = (cap.black_level(), cap.white_level());
    let lut = scale_lut(black, white, scale.max(0.0));
    let mut saturated = 0usize;
    let data = cap
        .data()
        .iter()
        .map(|&dn| {
            if f64::from(normalize_dn(dn, black, white)) * scale > 1.0 {
                saturated += 1;
            }
            lut[dn as usize]
        })
        .collect();
    Ok(Alignment {
        frame: cap.with_data(data)?,
        scale,
        saturated_fraction: saturated as f64 / cap.len() as f64,
    })
}

/// Scales `cap` so its exposure matches `expo_target`, offset by `eta`.
pub fn align_exposure(
    cap: &BayerFrame,
    expo_target: f64,
    eta: f64,
) -> Result<Alignment, IlluminationError> {
    let ratio = exposure_ratio(cap, expo_target)?;
    apply_scale(cap, ratio + eta)
}

/// Normalized histogram over `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    mass: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mass: f64,
}

impl Histogram {
    /// Normalizes raw counts. Fails on zero total.
    pub fn from_counts(counts: &[u64]) -> Result<Self, IlluminationError> {
        if counts.len() < 2 {
            return Err(IlluminationError::TooFewBins(counts.len()));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(IlluminationError::EmptyFrame);
        }
        let total = total as f64;
        Ok(Self {
            mass: counts.iter().map(|&c| c as f64 / total).collect(),
        })
    }

    /// Takes masses as given. Used for hand-built distributions in tests and tools.
    pub fn from_mass(mass: Vec<f64>) -> Result<Self, IlluminationError> {
        if mass.len() < 2 {
            return Err(IlluminationError::TooFewBins(mass.len()));
        }
        Ok(Self { mass })
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Debug dump: one record per bin with its value interval.
    pub fn to_dump(&self) -> Vec<HistogramBin> {
        let n = self.bins() as f64;
        self.mass
            .iter()
            .enumerate()
            .map(|(i, &mass)| HistogramBin {
                bin_lo: i as f64 / n,
                bin_hi: (i + 1) as f64 / n,
                mass,
            })
            .collect()
    }
}

/// Bin index of a value in `[0, 1]`; 1.0 lands in the last bin.
#[inline]
pub fn bin_index(y: f32, bins: usize) -> usize {
    // the saturating cast floors nonnegative values and maps negatives and NaN to 0
    ((f64::from(y) * bins as f64) as usize).min(bins - 1)
}

/// Per-DN luma contributions of the fixed ISP for one black/white level and
/// white balance: `LUMA_* * gamma(gain * normalized)` in f64, so that
/// `(r + g) + b` reproduces the ISP's luma arithmetic exactly.
#[derive(Clone, Debug)]
pub struct LumaTables {
    black: u16,
    white: u16,
    red: Vec<f64>,
    /// Indexed by `g1 + g2 - 2 * black` after clamping both to black.
    green: Vec<f64>,
    blue: Vec<f64>,
}

impl LumaTables {
    pub fn new(black: u16, white: u16, gains: WhiteBalance) -> Self {
        let [gr, gg, gb] = gains.gains();
        let channel = |gain: f32, weight: f64| -> Vec<f64> {
            (0..=white)
                .map(|dn| {
                    weight
                        * f64::from(gamma_encode_value(apply_gain(
                            normalize_dn(dn, black, white),
                            gain,
                        )))
                })
                .collect()
        };
        let green = (2 * u32::from(black)..=2 * u32::from(white))
            .map(|s| {
                LUMA_G
                    * f64::from(gamma_encode_value(apply_gain(
                        green_from_sum(s, black, white),
                        gg,
                    )))
            })
            .collect();
        Self {
            black,
            white,
            red: channel(gr, LUMA_R),
            green,
            blue: channel(gb, LUMA_B),
        }
    }

    /// Luma of one (red, green, green, blue) cell, identical to the fixed ISP's.
    #[inline]
    pub fn cell_luma(&self, [r, g1, g2, b]: [u16; 4]) -> f32 {
        let g = usize::from(g1.max(self.black) - self.black)
            + usize::from(g2.max(self.black) - self.black);
        (self.red[r as usize] + self.green[g] + self.blue[b as usize]) as f32
    }
}

/// Unique 2x2 CFA cells of a frame with multiplicities.
///
/// The luma of a cell depends only on its four DN values, so histograms of
/// remapped versions of the frame can be computed from the unique cells and
/// per-DN lookup tables rather than by re-running the ISP on every pixel.
#[derive(Clone, Debug)]
pub struct LumaProfile {
    red: Vec<u16>,
    green1: Vec<u16>,
    green2: Vec<u16>,
    blue: Vec<u16>,
    counts: Vec<u32>,
    black: u16,
    white: u16,
}

impl LumaProfile {
    pub fn new(frame: &BayerFrame) -> Self {
        let layout = frame.cfa().layout();
        let (w, h) = (frame.width() as usize / 2, frame.height() as usize / 2);
        let mut keys = Vec::with_capacity(w * h);
        for cy in 0..h {
            for cx in 0..w {
                let at = |(r, c): (usize, usize)| u64::from(frame.at(2 * cy + r, 2 * cx + c));
                keys.push(
                    at(layout.red)
                        | at(layout.green[0]) << 16
                        | at(layout.green[1]) << 32
                        | at(layout.blue) << 48,
                );
            }
        }
        keys.sort_unstable();
        let mut p = Self {
            red: Vec::new(),
            green1: Vec::new(),
            green2: Vec::new(),
            blue: Vec::new(),
            counts: Vec::new(),
            black: frame.black_level(),
            white: frame.white_level(),
        };
        let mut last = None;
        for key in keys {
            if last == Some(key) {
                *p.counts.last_mut().expect("nonempty") += 1;
                continue;
            }
            last = Some(key);
            p.red.push(key as u16);
            p.green1.push((key >> 16) as u16);
            p.green2.push((key >> 32) as u16);
            p.blue.push((key >> 48) as u16);
            p.counts.push(1);
        }
        p
    }

    pub fn unique_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn tables(&self, gains: WhiteBalance) -> LumaTables {
        LumaTables::new(self.black, self.white, gains)
    }

    /// Luma histogram of the frame after every DN is passed through `dn_map`
    /// (identity when `None`).
    pub fn histogram(
        &self,
        dn_map: Option<&[u16]>,
        bins: usize,
        gains: WhiteBalance,
    ) -> Result<Histogram, IlluminationError> {
        self.histogram_with(&self.tables(gains), dn_map, bins)
    }

    /// [`LumaProfile::histogram`] with tables built once by the caller.
    pub fn histogram_with(
        &self,
        tables: &LumaTables,
        dn_map: Option<&[u16]>,
        bins: usize,
    ) -> Result<Histogram, IlluminationError> {
        if bins < 2 {
            return Err(IlluminationError::TooFewBins(bins));
        }
        if self.counts.is_empty() {
            return Err(IlluminationError::EmptyFrame);
        }
        assert_eq!(
            (tables.black, tables.white),
            (self.black, self.white),
            "tables built for another frame"
        );
        let black = self.black;
        // DN offset above black after remapping; dark alignments touch only
        // the low end of each table
        let offset: Vec<u16> = match dn_map {
            Some(m) => m.iter().map(|&d| d.max(black) - black).collect(),
            None => (0..=self.white).map(|d| d.max(black) - black).collect(),
        };
        let (red, green, blue) = (
            &tables.red[black as usize..],
            &tables.green,
            &tables.blue[black as usize..],
        );

        // four interleaved count arrays break the store-to-load chain when
        // consecutive cells share a bin
        let mut counts = vec![[0u64; 4]; bins];
        let scale = bins as f64;
        for i in 0..self.counts.len() {
            let r = offset[self.red[i] as usize] as usize;
            let g =
                offset[self.green1[i] as usize] as usize + offset[self.green2[i] as usize] as usize;
            let b = offset[self.blue[i] as usize] as usize;
            let y = (red[r] + green[g] + blue[b]) as f32;
            // saturating cast: floor for y >= 0, 0 for negatives and NaN
            let bin = ((f64::from(y) * scale) as usize).min(bins - 1);
            counts[bin][i & 3] += u64::from(self.counts[i]);
        }
        let merged: Vec<u64> = counts.iter().map(|c| c.iter().sum()).collect();
        Histogram::from_counts(&merged)
    }
}

/// Histogram of the Y plane of the fixed-ISP rendering of `frame`.
pub fn luma_histogram(
    frame: &BayerFrame,
    bins: usize,
    gains: WhiteBalance,
) -> Result<Histogram, IlluminationError> {
    if bins < 2 {
        return Err(IlluminationError::TooFewBins(bins));
    }
    LumaProfile::new(frame).histogram(None, bins, gains)
}

/// `sum_c p_c * ln(p_c / (q_c + tau))`, with `0 * ln(0/x) = 0`.
pub fn kl_divergence(p: &Histogram, q: &Histogram, tau: f64) -> Result<f64, IlluminationError> {
    if p.bins() != q.bins() {
        return Err(IlluminationError::BinMismatch(p.bins(), q.bins()));
    }
    if !(tau > 0.0) {
        return Err(IlluminationError::InvalidTau(tau));
    }
    Ok(p.mass
        .iter()
        .zip(&q.mass)
        .filter(|(pc, _)| **pc > 0.0)
        .map(|(pc, qc)| pc * (pc / (qc + tau)).ln())
        .sum())
}

/// Outcome of the η search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaSearch {
    pub eta: f64,
    pub kl: f64,
    /// `target / expo(cap)`; the search bracket is `[-0.5, 2] * ratio`.
    pub ratio: f64,
    pub kl_at_zero: f64,
    pub evaluations: usize,
}

/// Finds η for aligning `cap` to `standard`, targeting `expo(standard)`.
pub fn search_eta(
    cap: &BayerFrame,
    standard: &BayerFrame,
    bins: usize,
    gains: WhiteBalance,
) -> Result<EtaSearch, IlluminationError> {
    search_eta_with_target(cap, standard, expo(standard), bins, gains)
}

/// η search with an explicit exposure target.
pub fn search_eta_with_target(
    cap: &BayerFrame,
    standard: &BayerFrame,
    expo_target: f64,
    bins: usize,
    gains: WhiteBalance,
) -> Result<EtaSearch, IlluminationError> {
    let ratio = exposure_ratio(cap, expo_target)?;
    let reference = luma_histogram(standard, bins, gains)?;
    let profile = LumaProfile::new(cap);
    let tables = profile.tables(gains);
    let (black, white) = (cap.black_level(), cap.white_level());
    minimize_eta(ratio, |eta| {
        let lut = scale_lut(black, white, (ratio + eta).max(0.0));
        let hist = profile.histogram_with(&tables, Some(&lut), bins)?;
        kl_divergence(&hist, &reference, DEFAULT_KL_TAU)
    })
}

/// `target / expo(cap)`, the η = 0 scale of [`align_exposure`].
pub fn exposure_ratio(cap: &BayerFrame, expo_target: f64) -> Result<f64, IlluminationError> {
    if !(expo_target > 0.0 && expo_target.is_finite()) {
        return Err(IlluminationError::InvalidTarget(expo_target));
    }
    let e = expo(cap);
    if e <= 0.0 {
        return Err(IlluminationError::ZeroExposureInput);
    }
    Ok(expo_target / e)
}

/// Minimizes `objective(eta)` over `[-0.5, 2] * ratio`.
///
/// The KL objective is piecewise constant in η (histograms change only when a
/// sample crosses a quantization or bin boundary), so a coarse grid over the
/// bracket picks the basin first and golden-section refines inside the
/// neighbouring grid cells. η = 0 is always probed and the best probe wins.
pub fn minimize_eta<E>(
    ratio: f64,
    mut objective: impl FnMut(f64) -> Result<f64, E>,
) -> Result<EtaSearch, E>
where
    E: From<IlluminationError>,
{
    let mut evaluations = 0usize;
    let mut best = (f64::NAN, f64::INFINITY);
    let mut probe = |eta: f64| -> Result<f64, E> {
        let kl = objective(eta)?;
        evaluations += 1;
        if kl.is_finite() && kl < best.1 {
            best = (eta, kl);
        }
        Ok(kl)
    };

    let kl_at_zero = probe(0.0)?;
    let (lo, hi) = (-0.5 * ratio, 2.0 * ratio);
    let step = (hi - lo) / (GRID_PROBES - 1) as f64;
    let mut grid_best = (0usize, f64::INFINITY);
    for i in 0..GRID_PROBES {
        let kl = probe(lo + step * i as f64)?;
        if kl < grid_best.1 {
            grid_best = (i, kl);
        }
    }
    let center = grid_best.0;
    let mut a = lo + step * center.saturating_sub(1) as f64;
    let mut b = lo + step * (center + 1).min(GRID_PROBES - 1) as f64;

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = probe(c)?;
    let mut fd = probe(d)?;
    for _ in 0..GOLDEN_ITERATIONS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = probe(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = probe(d)?;
        }
    }

    if !best.1.is_finite() {
        return Err(IlluminationError::SearchDiverged.into());
    }
    Ok(EtaSearch {
        eta: best.0,
        kl: best.1,
        ratio,
        kl_at_zero,
        evaluations,
    })
}
