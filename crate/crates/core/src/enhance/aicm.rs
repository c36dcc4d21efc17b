//! Adaptive illumination correction: a 3×3 embedding, global average pooling
//! and a two-layer 1×1 cascade giving bounded per-channel amplification
//! coefficients, then a 3×3 output convolution with a residual connection.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EnhanceError, FeatureMap};

pub const A_MIN: f64 = 1.0;
pub const A_MAX: f64 = 300.0;
const BLOB_MAGIC: &str = "f64-le";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Wrap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AicmWeights {
    pub channels: usize,
    pub hidden: usize,
    /// `[out][in][3][3]`, then per-output bias.
    pub embed: Vec<f64>,
    pub embed_bias: Vec<f64>,
    /// `[hidden][channels]`.
    pub squeeze: Vec<f64>,
    pub squeeze_bias: Vec<f64>,
    /// `[channels][hidden]`.
    pub expand: Vec<f64>,
    pub expand_bias: Vec<f64>,
    pub output: Vec<f64>,
    pub output_bias: Vec<f64>,
    pub a_min: f64,
    pub a_max: f64,
    pub padding: Padding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// JSON side of the weight file; the values live in a flat little-endian f64 blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AicmDescriptor {
    pub format: String,
    pub blob: String,
    pub channels: usize,
    pub hidden: usize,
    pub a_min: f64,
    pub a_max: f64,
    pub padding: Padding,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AicmOutput {
    pub features: FeatureMap,
    pub coefficients: Vec<f64>,
}

impl AicmWeights {
    pub fn zeros(channels: usize) -> Self {
        let hidden = (channels / 2).max(1);
        let c9 = channels * channels * 9;
        Self {
            channels,
            hidden,
            embed: vec![0.0; c9],
            embed_bias: vec![0.0; channels],
            squeeze: vec![0.0; hidden * channels],
            squeeze_bias: vec![0.0; hidden],
            expand: vec![0.0; channels * hidden],
            expand_bias: vec![0.0; channels],
            output: vec![0.0; c9],
            output_bias: vec![0.0; channels],
            a_min: A_MIN,
            a_max: A_MAX,
            padding: Padding::Zero,
        }
    }

    /// Independent `N(0, scale²)` entries.
    pub fn random<R: Rng + ?Sized>(channels: usize, scale: f64, rng: &mut R) -> Self {
        let mut w = Self::zeros(channels);
        for v in w.tensors_mut().into_iter().flat_map(|(_, t)| t.iter_mut()) {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
        w
    }

    fn layout(&self) -> [(&'static str, Vec<usize>); 8] {
        let (c, h) = (self.channels, self.hidden);
        [
            ("embed", vec![c, c, 3, 3]),
            ("embed_bias", vec![c]),
            ("squeeze", vec![h, c]),
            ("squeeze_bias", vec![h]),
            ("expand", vec![c, h]),
            ("expand_bias", vec![c]),
            ("output", vec![c, c, 3, 3]),
            ("output_bias", vec![c]),
        ]
    }

    fn tensors(&self) -> [(&'static str, &Vec<f64>); 8] {
        [
            ("embed", &self.embed),
            ("embed_bias", &self.embed_bias),
            ("squeeze", &self.squeeze),
            ("squeeze_bias", &self.squeeze_bias),
            ("expand", &self.expand),
            ("expand_bias", &self.expand_bias),
            ("output", &self.output),
            ("output_bias", &self.output_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 8] {
        [
            ("embed", &mut self.embed),
            ("embed_bias", &mut self.embed_bias),
            ("squeeze", &mut self.squeeze),
            ("squeeze_bias", &mut self.squeeze_bias),
            ("expand", &mut self.expand),
            ("expand_bias", &mut self.expand_bias),
            ("output", &mut self.output),
            ("output_bias", &mut self.output_bias),
        ]
    }

    pub fn validate(&self) -> Result<(), EnhanceError> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(EnhanceError::Weights(
                "channel and hidden widths must be positive".into(),
            ));
        }
        if !(A_MIN <= self.a_min && self.a_min <= self.a_max && self.a_max.is_finite()) {
            return Err(EnhanceError::Weights(format!(
                "need 1 <= a_min <= a_max, got [{}, {}]",
                self.a_min, self.a_max
            )));
        }
        for ((name, shape), (_, t)) in self.layout().iter().zip(self.tensors()) {
            if t.len() != shape.iter().product::<usize>() {
                return Err(EnhanceError::Weights(format!(
                    "{name} has {} values, shape {shape:?}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(EnhanceError::Weights(format!(
                    "{name} has non-finite values"
                )));
            }
        }
        Ok(())
    }

    pub fn descriptor(&self, blob: &str) -> AicmDescriptor {
        let mut offset = 0;
        let tensors = self
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let entry = TensorEntry {
                    name: name.into(),
                    offset,
                    shape,
                };
                offset += entry.shape.iter().product::<usize>();
                entry
            })
            .collect();
        AicmDescriptor {
            format: BLOB_MAGIC.into(),
            blob: blob.into(),
            channels: self.channels,
            hidden: self.hidden,
            a_min: self.a_min,
            a_max: self.a_max,
            padding: self.padding,
            tensors,
        }
    }

    pub fn to_blob(&self) -> Vec<u8> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn from_parts(desc: &AicmDescriptor, blob: &[u8]) -> Result<Self, EnhanceError> {
        if desc.format != BLOB_MAGIC {
            return Err(EnhanceError::Weights(format!(
                "unsupported blob format {:?}",
                desc.format
            )));
        }
        if blob.len() % 8 != 0 {
            return Err(EnhanceError::Weights(format!(
                "blob length {} is not a multiple of 8",
                blob.len()
            )));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut w = Self::zeros(desc.channels);
        w.hidden = desc.hidden;
        w.a_min = desc.a_min;
        w.a_max = desc.a_max;
        w.padding = desc.padding;
        let layout = w.layout();
        for ((name, shape), (_, t)) in layout.iter().zip(w.tensors_mut()) {
            let entry = desc
                .tensors
                .iter()
                .find(|e| e.name == *name)
                .ok_or_else(|| EnhanceError::Weights(format!("descriptor lacks tensor {name}")))?;
            if entry.shape != *shape {
                return Err(EnhanceError::Weights(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    entry.shape
                )));
            }
            let len = shape.iter().product::<usize>();
            let slice = values
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| {
                    EnhanceError::Weights(format!("{name} runs past the end of the blob"))
                })?;
            *t = slice.to_vec();
        }
        w.validate()?;
        Ok(w)
    }

    /// Writes `path` (JSON descriptor) and a sibling `.f64` blob.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let blob_path = path.with_extension("f64");
        let blob_name = blob_path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("weights.f64");
        let json = serde_json::to_string_pretty(&self.descriptor(blob_name))
            .map_err(std::io::Error::other)?;
        fs::write(&blob_path, self.to_blob())?;
        fs::write(path, json + "\n")
    }

    pub fn load(path: &Path) -> Result<Self, EnhanceError> {
        let io =
            |p: &Path, e: std::io::Error| EnhanceError::Weights(format!("{}: {e}", p.display()));
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        let desc: AicmDescriptor =
            serde_json::from_str(&text).map_err(|e| EnhanceError::Weights(e.to_string()))?;
        let blob_path: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&desc.blob);
        let blob = fs::read(&blob_path).map_err(|e| io(&blob_path, e))?;
        Self::from_parts(&desc, &blob)
    }

    /// Maps a cascade output into `[a_min, a_max]`.
    pub fn activation(&self, z: f64) -> f64 {
        let s = 1.0 / (1.0 + (-z).exp());
        (self.a_min + (self.a_max - self.a_min) * s).clamp(self.a_min, self.a_max)
    }
}

fn conv3x3(f: &FeatureMap, kernel: &[f64], bias: &[f64], padding: Padding) -> FeatureMap {
    let (h, w, c) = f.shape();
    let mut out = FeatureMap::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let o = &mut out.data[(y * w + x) * c..(y * w + x + 1) * c];
            o.copy_from_slice(bias);
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    let (sy, sx) = match padding {
                        Padding::Zero
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize =>
                        {
                            continue
                        }
                        Padding::Zero => (sy as usize, sx as usize),
                        Padding::Wrap => (
                            sy.rem_euclid(h as isize) as usize,
                            sx.rem_euclid(w as isize) as usize,
                        ),
                    };
                    let src = &f.data[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    for (oc, ov) in o.iter_mut().enumerate() {
                        let k = &kernel[oc * c * 9..];
                        for (ic, &v) in src.iter().enumerate() {
                            *ov += k[ic * 9 + ky * 3 + kx] * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn aicm_forward(f_raw: &FeatureMap, w: &AicmWeights) -> Result<AicmOutput, EnhanceError> {
    if f_raw.channels() != w.channels {
        return Err(EnhanceError::ChannelMismatch {
            expected: w.channels,
            got: f_raw.channels(),
        });
    }
    w.validate()?;
    let c = w.channels;
    let embed = conv3x3(f_raw, &w.embed, &w.embed_bias, w.padding);

    let mut pooled = vec![0.0; c];
    for px in embed.pixels() {
        pooled.iter_mut().zip(px).for_each(|(p, v)| *p += v);
    }
    let inv = 1.0 / embed.positions() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);

    let hidden: Vec<f64> = (0..w.hidden)
        .map(|j| {
            let row = &w.squeeze[j * c..(j + 1) * c];
            (w.squeeze_bias[j] + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
        })
        .collect();
    let coefficients: Vec<f64> = (0..c)
        .map(|k| {
            let row = &w.expand[k * w.hidden..(k + 1) * w.hidden];
            w.activation(
                w.expand_bias[k] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>(),
            )
        })
        .collect();

    let mut refined = embed;
    for px in refined.data.chunks_exact_mut(c) {
        px.iter_mut().zip(&coefficients).for_each(|(v, a)| *v *= a);
    }
    let mut features = conv3x3(&refined, &w.output, &w.output_bias, w.padding);
    features
        .data
        .iter_mut()
        .zip(&f_raw.data)
        .for_each(|(o, x)| *o += x);
    Ok(AicmOutput {
        features,
        coefficients,
    })
}
