//! Paired-to-paired synthesis: crop, illumination alignment against a band
//! standard, calibrated noise injection, dataset build and verification.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::illumination::{
    align_exposure, bin_index, expo, exposure_ratio, kl_divergence, luma_histogram, minimize_eta,
    scale_lut, EtaSearch, Histogram, HistogramBin, IlluminanceBand, IlluminationError, LumaTables,
    DEFAULT_BINS, DEFAULT_KL_TAU, KL_THRESHOLD,
};
use crate::imaging::{
    centered_window, crop, decode_ppm, encode_ppm, load_bayer, write_bayer, BayerFrame,
    ImagingError, SrgbFrame, WhiteBalance,
};
use crate::noise::{add_noise, draw_iso, FrozenNoise, NoiseError, NoiseModel, NoiseOptions};
use crate::rng::{RngStream, Stage};

pub mod demo;

pub const DEFAULT_CROP: (u32, u32) = (3840, 2160);
/// Train:eval proportion of the published split.
pub const SPLIT_RATIO: (usize, usize) = (1500, 180);
pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "DARKFORGE_THREADS";
/// Approximate number of CFA cells the noise-aware search evaluates.
pub const SEARCH_LATTICE_CELLS: usize = 1 << 17;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Illumination(#[from] IlluminationError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("crop {w}x{h} must be even and fit in {width}x{height}")]
    InvalidCrop {
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("reference {ref_w}x{ref_h} matches neither the capture {width}x{height} nor its half resolution")]
    ReferenceMismatch {
        ref_w: usize,
        ref_h: usize,
        width: u32,
        height: u32,
    },
    #[error("source manifest lists no pairs")]
    NoSources,
    #[error("no band configured")]
    NoBands,
    #[error("band {0} has no standard frame")]
    NoStandard(IlluminanceBand),
    #[error("duplicate pair id {0}")]
    DuplicatePairId(String),
    #[error("all {0} entries failed")]
    AllEntriesFailed(usize),
    #[error("pair {pair_id}: missing file {path}")]
    MissingFile { pair_id: String, path: PathBuf },
    #[error("manifest has no synthesized entries")]
    EmptyManifest,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Worker count requested through `DARKFORGE_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

/// Per-band synthesis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub band: IlluminanceBand,
    /// Band standard frames; each pair uses one chosen by its stream id.
    pub standard_refs: Vec<PathBuf>,
    pub crop: (u32, u32),
    pub seed: u64,
    pub bins: usize,
    pub gains: WhiteBalance,
    pub dark_bank: bool,
}

impl SynthConfig {
    pub fn new(band: IlluminanceBand, seed: u64) -> Self {
        Self {
            band,
            standard_refs: Vec::new(),
            crop: DEFAULT_CROP,
            seed,
            bins: DEFAULT_BINS,
            gains: WhiteBalance::default(),
            dark_bank: false,
        }
    }
}

/// Provenance of one synthesized pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFields {
    pub eta: f64,
    /// `expo(standard) / expo(cap)`
    pub ratio: f64,
    pub iso: f64,
    /// Search objective at the chosen η.
    pub search_kl: f64,
    /// KL of the final noisy frame against the standard.
    pub achieved_kl: f64,
    pub saturated_fraction: f64,
    pub saturation_warning: bool,
    pub kl_warning: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub raw: BayerFrame,
    pub srgb: SrgbFrame,
    pub fields: PairFields,
    /// True when `srgb` is the input reference, uncropped.
    pub reference_untouched: bool,
}

fn crop_inputs(
    cap: &BayerFrame,
    reference: &SrgbFrame,
    (w, h): (u32, u32),
) -> Result<(BayerFrame, Option<SrgbFrame>), SynthError> {
    let (width, height) = (cap.width(), cap.height());
    if w == 0 || h == 0 || w % 2 == 1 || h % 2 == 1 || w > width || h > height {
        return Err(SynthError::InvalidCrop {
            w,
            h,
            width,
            height,
        });
    }
    let div = if (reference.width, reference.height) == (width as usize, height as usize) {
        1
    } else if (reference.width, reference.height) == (width as usize / 2, height as usize / 2) {
        2
    } else {
        return Err(SynthError::ReferenceMismatch {
            ref_w: reference.width,
            ref_h: reference.height,
            width,
            height,
        });
    };
    if (w, h) == (width, height) {
        return Ok((cap.clone(), None));
    }
    let (x0, y0) = centered_window(cap, w, h)?;
    let cap = crop(cap, x0, y0, w, h)?;
    let reference = reference.crop(
        x0 as usize / div,
        y0 as usize / div,
        w as usize / div,
        h as usize / div,
    )?;
    Ok((cap, Some(reference)))
}

/// η search that scores noisy candidates, as the generated frame will be
/// noisy when compared against the standard.
///
/// The objective is the KL between the standard's luma histogram and that of
/// `add_noise(align_exposure(cap, expo(standard), η))`, evaluated on a regular
/// lattice of about [`SEARCH_LATTICE_CELLS`] cells with frozen noise variates,
/// so every probe sees the same noise realization.
#[allow(clippy::too_many_arguments)]
pub fn search_eta_noise_aware(
    cap: &BayerFrame,
    standard: &BayerFrame,
    iso: f64,
    model: &NoiseModel,
    opts: NoiseOptions,
    bins: usize,
    gains: WhiteBalance,
    rng: RngStream,
) -> Result<EtaSearch, SynthError> {
    let ratio = exposure_ratio(cap, expo(standard))?;
    let reference = luma_histogram(standard, bins, gains)?;
    let (black, white) = (cap.black_level(), cap.white_level());
    let tables = LumaTables::new(black, white, gains);
    let (cw, ch) = (cap.width() as usize / 2, cap.height() as usize / 2);
    let stride = ((cw * ch) as f64 / SEARCH_LATTICE_CELLS as f64)
        .sqrt()
        .ceil()
        .max(1.0) as usize;
    let layout = cap.cfa().layout();
    let mut sites = Vec::new();
    for cy in (0..ch).step_by(stride) {
        for cx in (0..cw).step_by(stride) {
            for (r, c) in [layout.red, layout.green[0], layout.green[1], layout.blue] {
                sites.push((2 * cy + r, 2 * cx + c));
            }
        }
    }
    let clean: Vec<u16> = sites.iter().map(|&(r, c)| cap.at(r, c)).collect();
    let frozen = FrozenNoise::new(cap, &sites, iso, model, rng, opts)?;
    minimize_eta(ratio, |eta| {
        let lut = scale_lut(black, white, (ratio + eta).max(0.0));
        let mut counts = vec![0u64; bins];
        for (i, cell) in clean.chunks_exact(4).enumerate() {
            let px = |j: usize| frozen.apply(4 * i + j, lut[cell[j] as usize]);
            counts[bin_index(tables.cell_luma([px(0), px(1), px(2), px(3)]), bins)] += 1;
        }
        Ok(kl_divergence(
            &Histogram::from_counts(&counts)?,
            &reference,
            DEFAULT_KL_TAU,
        )?)
    })
}

/// Synthesizes one low-light frame from a normally exposed capture.
///
/// Steps: crop, ISO draw, noise-aware η search against `standard`, alignment,
/// noise. The reference sRGB frame is cropped with the same window and
/// otherwise untouched.
pub fn synthesize_pair(
    cap: &BayerFrame,
    reference: &SrgbFrame,
    standard: &BayerFrame,
    model: &NoiseModel,
    cfg: &SynthConfig,
    rng: RngStream,
) -> Result<SynthPair, SynthError> {
    let (cap, cropped_ref) = crop_inputs(cap, reference, cfg.crop)?;
    let opts = NoiseOptions {
        dark_bank: cfg.dark_bank,
    };
    let iso = pair_iso(cfg.band, rng);
    let search =
        search_eta_noise_aware(&cap, standard, iso, model, opts, cfg.bins, cfg.gains, rng)?;
    let aligned = align_exposure(&cap, expo(standard), search.eta)?;
    let raw = add_noise(&aligned.frame, iso, model, rng, opts)?;
    let achieved_kl = kl_divergence(
        &luma_histogram(&raw, cfg.bins, cfg.gains)?,
        &luma_histogram(standard, cfg.bins, cfg.gains)?,
        DEFAULT_KL_TAU,
    )?;
    let fields = PairFields {
        eta: search.eta,
        ratio: search.ratio,
        iso,
        search_kl: search.kl,
        achieved_kl,
        saturated_fraction: aligned.saturated_fraction,
        saturation_warning: aligned.saturation_warning(),
        kl_warning: achieved_kl > KL_THRESHOLD,
    };
    let reference_untouched = cropped_ref.is_none();
    Ok(SynthPair {
        raw,
        srgb: cropped_ref.unwrap_or_else(|| reference.clone()),
        fields,
        reference_untouched,
    })
}

/// The equivalent ISO [`synthesize_pair`] draws for a pair stream.
pub fn pair_iso(band: IlluminanceBand, rng: RngStream) -> f64 {
    draw_iso(band, &mut rng.stage(Stage::Iso).rng())
}

/// Deterministic per-pair stream id from the pair id.
pub fn pair_stream(pair_id: &str) -> u64 {
    let digest = Sha256::digest(pair_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// A normally exposed surrogate for a band's laboratory standard: `cap`
/// aligned to the band's surrogate exposure and noised at the geometric-mean
/// ISO of the band.
pub fn surrogate_standard(
    cap: &BayerFrame,
    band: IlluminanceBand,
    model: &NoiseModel,
    seed: u64,
) -> Result<BayerFrame, SynthError> {
    let aligned = align_exposure(cap, band.surrogate_expo(), 0.0)?;
    let (lo, hi) = band.iso_range();
    let rng = RngStream::new(seed, pair_stream(&format!("standard_{band}")));
    Ok(add_noise(
        &aligned.frame,
        (lo * hi).sqrt(),
        model,
        rng,
        NoiseOptions::default(),
    )?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcePair {
    pub cap: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub id: String,
}

/// Input list `{"pairs": [{"cap", "ref", "id"}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub pairs: Vec<SourcePair>,
}

impl SourceManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        Ok(serde_json::from_slice(
            &fs::read(path).map_err(io_err(path))?,
        )?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Ok,
    Failed,
}

/// Outputs of a synthesized entry; paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryOutput {
    #[serde(flatten)]
    pub fields: PairFields,
    pub out_raw_path: String,
    pub out_srgb_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub source_id: String,
    pub source_cap_path: String,
    pub source_ref_path: String,
    pub band: IlluminanceBand,
    pub split: Split,
    pub standard_path: String,
    pub seed: u64,
    pub stream: u64,
    pub status: EntryStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", flatten)]
    pub output: Option<EntryOutput>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        Ok(serde_json::from_slice(
            &fs::read(path).map_err(io_err(path))?,
        )?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    pub fn ok_entries(&self) -> impl Iterator<Item = (&ManifestEntry, &EntryOutput)> {
        self.entries
            .iter()
            .filter_map(|e| e.output.as_ref().map(|o| (e, o)))
    }
}

/// Assigns splits by ranking pair ids on their SHA-256 digest: the first
/// `round(n * 1500 / 1680)` are train. Independent of input order.
pub fn assign_splits<'a>(pair_ids: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, Split> {
    let mut ranked: Vec<([u8; 32], &str)> = pair_ids
        .into_iter()
        .map(|id| (Sha256::digest(id.as_bytes()).into(), id))
        .collect();
    ranked.sort_unstable();
    let (train, eval) = SPLIT_RATIO;
    let n_train = (ranked.len() * train + (train + eval) / 2) / (train + eval);
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (_, id))| {
            (
                id.to_string(),
                if i < n_train {
                    Split::Train
                } else {
                    Split::Eval
                },
            )
        })
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Path as recorded in the manifest: relative to `root` when inside it.
fn recorded_path(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

struct Job<'a> {
    pair_id: String,
    source: &'a SourcePair,
    cfg: &'a SynthConfig,
    split: Split,
    standard: usize,
    stream: u64,
}

fn run_job(
    job: &Job<'_>,
    base: &Path,
    standard: &BayerFrame,
    model: &NoiseModel,
    out: &Path,
) -> Result<EntryOutput, SynthError> {
    let cap_path = resolve(base, &job.source.cap);
    let ref_path = resolve(base, &job.source.reference);
    let cap = load_bayer(&cap_path).map_err(|e| match e {
        ImagingError::Io(source) => SynthError::Io {
            path: cap_path.clone(),
            source,
        },
        e => e.into(),
    })?;
    let ref_bytes = fs::read(&ref_path).map_err(io_err(&ref_path))?;
    let reference = decode_ppm(&ref_bytes)?;
    let rng = RngStream::new(job.cfg.seed, job.stream);
    let pair = synthesize_pair(&cap, &reference, standard, model, job.cfg, rng)?;

    let rel_dir = Path::new(job.cfg.band.tag()).join(job.split.dir());
    let raw_rel = rel_dir.join(format!("{}.siedraw", job.pair_id));
    let srgb_rel = rel_dir.join(format!("{}.ppm", job.pair_id));
    let raw_path = out.join(&raw_rel);
    write_bayer(&pair.raw, &raw_path).map_err(|e| match e {
        ImagingError::Io(source) => SynthError::Io {
            path: raw_path.clone(),
            source,
        },
        e => e.into(),
    })?;
    let srgb_bytes = if pair.reference_untouched {
        ref_bytes
    } else {
        encode_ppm(&pair.srgb)
    };
    let srgb_path = out.join(&srgb_rel);
    fs::write(&srgb_path, srgb_bytes).map_err(io_err(&srgb_path))?;
    Ok(EntryOutput {
        fields: pair.fields,
        out_raw_path: raw_rel.to_string_lossy().into_owned(),
        out_srgb_path: srgb_rel.to_string_lossy().into_owned(),
    })
}

/// Synthesizes every (source, band) pair into `out` and writes `out/manifest.json`.
///
/// Source paths resolve against `base`. Per-entry failures are recorded and
/// the build continues; the manifest is always written.
pub fn build_dataset(
    sources: &SourceManifest,
    base: &Path,
    configs: &[SynthConfig],
    model: &NoiseModel,
    out: &Path,
) -> Result<DatasetManifest, SynthError> {
    if sources.pairs.is_empty() {
        return Err(SynthError::NoSources);
    }
    if configs.is_empty() {
        return Err(SynthError::NoBands);
    }
    let mut standards: Vec<Vec<(String, BayerFrame)>> = Vec::with_capacity(configs.len());
    for cfg in configs {
        if cfg.standard_refs.is_empty() {
            return Err(SynthError::NoStandard(cfg.band));
        }
        let frames = cfg
            .standard_refs
            .iter()
            .map(|p| Ok((recorded_path(p, out), load_bayer(p)?)))
            .collect::<Result<Vec<_>, SynthError>>()?;
        standards.push(frames);
    }

    let mut jobs = Vec::new();
    let mut seen = BTreeSet::new();
    for (ci, cfg) in configs.iter().enumerate() {
        let ids: Vec<String> = sources
            .pairs
            .iter()
            .map(|s| format!("{}_{}", s.id, cfg.band))
            .collect();
        let splits = assign_splits(ids.iter().map(String::as_str));
        for (source, pair_id) in sources.pairs.iter().zip(ids) {
            if !seen.insert(pair_id.clone()) {
                return Err(SynthError::DuplicatePairId(pair_id));
            }
            let stream = pair_stream(&pair_id);
            jobs.push(Job {
                split: splits[&pair_id],
                standard: (stream % standards[ci].len() as u64) as usize,
                pair_id,
                source,
                cfg,
                stream,
            });
        }
    }
    for cfg in configs {
        for split in [Split::Train, Split::Eval] {
            let dir = out.join(cfg.band.tag()).join(split.dir());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
    }

    let band_index: BTreeMap<IlluminanceBand, usize> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| (c.band, i))
        .collect();
    let mut entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|job| {
            let (standard_path, standard) = &standards[band_index[&job.cfg.band]][job.standard];
            let result = run_job(job, base, standard, model, out);
            let (status, error, output) = match result {
                Ok(o) => (EntryStatus::Ok, None, Some(o)),
                Err(e) => (EntryStatus::Failed, Some(e.to_string()), None),
            };
            ManifestEntry {
                pair_id: job.pair_id.clone(),
                source_id: job.source.id.clone(),
                source_cap_path: job.source.cap.clone(),
                source_ref_path: job.source.reference.clone(),
                band: job.cfg.band,
                split: job.split,
                standard_path: standard_path.clone(),
                seed: job.cfg.seed,
                stream: job.stream,
                status,
                error,
                output,
            }
        })
        .collect();
    entries.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let manifest = DatasetManifest { entries };
    manifest.save(out.join(MANIFEST_FILE))?;
    if manifest.ok_entries().next().is_none() {
        return Err(SynthError::AllEntriesFailed(manifest.entries.len()));
    }
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub bins: usize,
    pub gains: WhiteBalance,
    pub dump_histograms: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            gains: WhiteBalance::default(),
            dump_histograms: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryCheck {
    pub pair_id: String,
    pub band: IlluminanceBand,
    pub kl: f64,
    pub saturation_warning: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Vec<HistogramBin>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_histogram: Option<Vec<HistogramBin>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub band: IlluminanceBand,
    pub pairs: usize,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub saturation_fraction: f64,
    pub above_threshold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub bands: Vec<BandReport>,
    pub failed_entries: usize,
    pub entries: Vec<EntryCheck>,
}

impl VerifyReport {
    pub fn to_json(&self) -> Result<String, SynthError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<6} {:>6} {:>10} {:>10} {:>10} {:>7}\n",
            "band", "pairs", "mean_kl", "max_kl", "saturated", "over"
        );
        for b in &self.bands {
            out += &format!(
                "{:<6} {:>6} {:>10.6} {:>10.6} {:>10.4} {:>7}\n",
                b.band.tag(),
                b.pairs,
                b.mean_kl,
                b.max_kl,
                b.saturation_fraction,
                b.above_threshold
            );
        }
        if self.failed_entries > 0 {
            out += &format!("failed entries: {}\n", self.failed_entries);
        }
        out
    }

    pub fn passes(&self) -> bool {
        self.bands.iter().all(|b| b.mean_kl <= KL_THRESHOLD)
    }
}

/// Recomputes the KL of every synthesized frame against its band standard.
///
/// `standards` overrides the per-entry standard paths recorded in the manifest,
/// which otherwise resolve against `root`.
pub fn verify_dataset(
    manifest: &DatasetManifest,
    root: &Path,
    standards: Option<&BTreeMap<IlluminanceBand, BayerFrame>>,
    opts: VerifyOptions,
) -> Result<VerifyReport, SynthError> {
    let ok: Vec<_> = manifest.ok_entries().collect();
    if ok.is_empty() {
        return Err(SynthError::EmptyManifest);
    }
    for (entry, output) in &ok {
        for rel in [&output.out_raw_path, &output.out_srgb_path] {
            let path = root.join(rel);
            if !path.is_file() {
                return Err(SynthError::MissingFile {
                    pair_id: entry.pair_id.clone(),
                    path,
                });
            }
        }
    }

    let mut loaded: BTreeMap<String, crate::illumination::Histogram> = BTreeMap::new();
    let mut standard_hist =
        |entry: &ManifestEntry| -> Result<crate::illumination::Histogram, SynthError> {
            let key = match standards {
                Some(_) => entry.band.tag().to_string(),
                None => entry.standard_path.clone(),
            };
            if let Some(h) = loaded.get(&key) {
                return Ok(h.clone());
            }
            let frame = match standards {
                Some(map) => map
                    .get(&entry.band)
                    .cloned()
                    .ok_or(SynthError::NoStandard(entry.band))?,
                None => {
                    let path = resolve(root, &entry.standard_path);
                    if !path.is_file() {
                        return Err(SynthError::MissingFile {
                            pair_id: entry.pair_id.clone(),
                            path,
                        });
                    }
                    load_bayer(path)?
                }
            };
            let h = luma_histogram(&frame, opts.bins, opts.gains)?;
            loaded.insert(key, h.clone());
            Ok(h)
        };
    let references = ok
        .iter()
        .map(|(e, _)| standard_hist(e))
        .collect::<Result<Vec<_>, SynthError>>()?;

    let entries = ok
        .par_iter()
        .zip(references.par_iter())
        .map(|((entry, output), reference)| {
            let frame = load_bayer(root.join(&output.out_raw_path))?;
            let hist = luma_histogram(&frame, opts.bins, opts.gains)?;
            let kl = kl_divergence(&hist, reference, DEFAULT_KL_TAU)?;
            Ok(EntryCheck {
                pair_id: entry.pair_id.clone(),
                band: entry.band,
                kl,
                saturation_warning: output.fields.saturation_warning,
                histogram: opts.dump_histograms.then(|| hist.to_dump()),
                standard_histogram: opts.dump_histograms.then(|| reference.to_dump()),
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let mut bands = Vec::new();
    for band in IlluminanceBand::ALL {
        let checks: Vec<&EntryCheck> = entries.iter().filter(|c| c.band == band).collect();
        if checks.is_empty() {
            continue;
        }
        let n = checks.len();
        bands.push(BandReport {
            band,
            pairs: n,
            mean_kl: checks.iter().map(|c| c.kl).sum::<f64>() / n as f64,
            max_kl: checks.iter().map(|c| c.kl).fold(0.0, f64::max),
            saturation_fraction: checks.iter().filter(|c| c.saturation_warning).count() as f64
                / n as f64,
            above_threshold: checks.iter().filter(|c| c.kl > KL_THRESHOLD).count(),
        });
    }
    Ok(VerifyReport {
        bands,
        failed_entries: manifest.entries.len() - ok.len(),
        entries,
    })
}
