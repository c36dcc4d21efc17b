//! Non-network math of the enhancement framework: Retinex decomposition,
//! the training losses with analytic gradients, the adaptive illumination
//! correction module (AICM) and a finite-difference gradient checker.
//!
//! Feature maps are `(h, w, C)` row-major with channels innermost. L1 terms
//! are mean-reduced; at `|x| = 0` and at channel-max ties the subgradient is 0.

mod aicm;

pub use aicm::{
    aicm_forward, AicmDescriptor, AicmOutput, AicmWeights, Padding, TensorEntry, A_MAX, A_MIN,
};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffusion::Tensor;

pub const RETINEX_EPS: f64 = 1e-6;
pub const HISTOGRAM_BINS: usize = 64;
pub const CCL_TAU: f64 = 1e-8;
pub const LAMBDA_CCL: f64 = 0.1;
pub const GRADCHECK_COORDS: usize = 200;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Default kernel bandwidth: a quarter of the bin width on `[0, 1]`.
pub fn default_bandwidth(bins: usize) -> f64 {
    0.25 / bins as f64
}

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("shapes {0:?} and {1:?} differ")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("feature map has {got} channels, weights expect {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid feature map: {0}")]
    InvalidShape(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("missing loss part `{0}`")]
    MissingPart(&'static str),
    #[error("non-finite value at coordinate {0}")]
    NonFiniteValue(usize),
    #[error("weights: {0}")]
    Weights(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, EnhanceError> {
        if c == 0 || h == 0 || w == 0 {
            return Err(EnhanceError::InvalidShape(format!(
                "({h}, {w}, {c}) has an empty axis"
            )));
        }
        if data.len() != h * w * c {
            return Err(EnhanceError::InvalidShape(format!(
                "({h}, {w}, {c}) needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EnhanceError::NonFiniteValue(i));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    /// Channel vector at each position.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.c)
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, EnhanceError> {
        Self::new(self.h, self.w, self.c, data)
    }

    /// Cyclic shift by `(dy, dx)`: output `(y, x)` reads input `(y - dy, x - dx)`.
    pub fn roll(&self, dy: usize, dx: usize) -> Self {
        let (h, w) = (self.h, self.w);
        Self::from_fn(h, w, self.c, |y, x, ch| {
            self.at((y + h - dy % h) % h, (x + w - dx % w) % w, ch)
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.h, self.w, self.c],
            data: self.data.clone(),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, EnhanceError> {
        match t.shape[..] {
            [h, w, c] => Self::new(h, w, c, t.data.clone()),
            [h, w] => Self::new(h, w, 1, t.data.clone()),
            _ => Err(EnhanceError::InvalidShape(format!(
                "tensor shape {:?} is not (h, w[, c])",
                t.shape
            ))),
        }
    }

    fn same_shape(&self, other: &FeatureMap) -> Result<(), EnhanceError> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(shape_error(self, other))
        }
    }
}

fn shape_error(a: &FeatureMap, b: &FeatureMap) -> EnhanceError {
    EnhanceError::ShapeMismatch(vec![a.h, a.w, a.c], vec![b.h, b.w, b.c])
}

/// A loss value and its gradient with respect to the first argument.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss<G> {
    pub value: f64,
    pub grad: G,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetinexPair {
    /// `(h, w, 1)`.
    pub illumination: FeatureMap,
    pub reflectance: FeatureMap,
}

/// Illumination as the per-position channel max, reflectance `F / (L + eps)`.
pub fn retinex_decompose(f: &FeatureMap, eps: f64) -> RetinexPair {
    let mut l = Vec::with_capacity(f.positions());
    let mut r = Vec::with_capacity(f.data.len());
    for px in f.pixels() {
        let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        l.push(m);
        r.extend(px.iter().map(|v| v / (m + eps)));
    }
    RetinexPair {
        illumination: FeatureMap {
            h: f.h,
            w: f.w,
            c: 1,
            data: l,
        },
        reflectance: FeatureMap {
            h: f.h,
            w: f.w,
            c: f.c,
            data: r,
        },
    }
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the unique channel maximum, `None` on ties.
fn unique_argmax(px: &[f64]) -> Option<usize> {
    let mut best = 0;
    let mut tied = false;
    for (k, &v) in px.iter().enumerate().skip(1) {
        if v > px[best] {
            best = k;
            tied = false;
        } else if v == px[best] {
            tied = true;
        }
    }
    (!tied).then_some(best)
}

/// Illumination-correction loss: `mean|L(F̂) - L(F̃)| + mean|R(F̂) - R(F_raw)|`.
pub fn loss_icl(
    fhat: &FeatureMap,
    ftilde: &FeatureMap,
    fraw: &FeatureMap,
) -> Result<Loss<FeatureMap>, EnhanceError> {
    fhat.same_shape(ftilde)?;
    fhat.same_shape(fraw)?;
    let eps = RETINEX_EPS;
    let (n, c) = (fhat.positions(), fhat.c);
    let target_l = retinex_decompose(ftilde, eps).illumination;
    let target_r = retinex_decompose(fraw, eps).reflectance;
    let wl = 1.0 / n as f64;
    let wr = 1.0 / (n * c) as f64;

    let mut l_term = 0.0;
    let mut r_term = 0.0;
    let mut grad = vec![0.0; fhat.data.len()];
    for p in 0..n {
        let px = &fhat.data[p * c..(p + 1) * c];
        let g = &mut grad[p * c..(p + 1) * c];
        let l = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom = l + eps;
        let dl = l - target_l.data[p];
        l_term += dl.abs();

        // d/dF_k of sum_c |F_c / (L + eps) - R_c|, with L depending on the argmax channel
        let mut through_l = 0.0;
        for k in 0..c {
            let d = px[k] / denom - target_r.data[p * c + k];
            r_term += d.abs();
            let s = sign(d) * wr;
            g[k] += s / denom;
            through_l -= s * px[k] / (denom * denom);
        }
        if let Some(k) = unique_argmax(px) {
            g[k] += through_l + sign(dl) * wl;
        }
    }
    Ok(Loss {
        value: l_term * wl + r_term * wr,
        grad: fhat.with_data(grad)?,
    })
}

fn mean_l1(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let w = 1.0 / a.len().max(1) as f64;
    let value = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * w;
    (
        value,
        a.iter().zip(b).map(|(x, y)| sign(x - y) * w).collect(),
    )
}

fn same_tensor_shape(a: &Tensor, b: &Tensor) -> Result<(), EnhanceError> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(EnhanceError::ShapeMismatch(
            a.shape.clone(),
            b.shape.clone(),
        ))
    }
}

/// Content diffusion loss `mean|x̂0 - x0|`.
pub fn loss_cdl(x0hat: &Tensor, x0: &Tensor) -> Result<Loss<Tensor>, EnhanceError> {
    same_tensor_shape(x0hat, x0)?;
    let (value, grad) = mean_l1(&x0hat.data, &x0.data);
    Ok(Loss {
        value,
        grad: Tensor {
            shape: x0hat.shape.clone(),
            data: grad,
        },
    })
}

/// Content loss: sum of mean-L1 reconstruction errors over the domains given
/// as `(input, reconstruction)` pairs.
pub fn loss_con(domains: &[(&Tensor, &Tensor)]) -> Result<f64, EnhanceError> {
    let mut total = 0.0;
    for (i, r) in domains {
        same_tensor_shape(i, r)?;
        total += mean_l1(&i.data, &r.data).0;
    }
    Ok(total)
}

/// Per-channel soft histogram over `[0, 1]` with Gaussian kernels centred on
/// the bins, each sample's kernel weights normalized to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftHistogram {
    pub bins: usize,
    pub bandwidth: f64,
    /// `mass[c * bins + b]`.
    pub mass: Vec<f64>,
}

impl SoftHistogram {
    pub fn channels(&self) -> usize {
        self.mass.len() / self.bins
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.mass[c * self.bins..(c + 1) * self.bins]
    }
}

fn check_histogram_params(bins: usize, bandwidth: f64) -> Result<(), EnhanceError> {
    if bins < 2 {
        return Err(EnhanceError::InvalidParam(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(EnhanceError::InvalidParam(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    Ok(())
}

/// Normalized kernel weights of one value and their `d/dx` of the exponent.
/// Max-shifted so values far outside the range do not underflow to 0/0.
struct Kernel {
    centers: Vec<f64>,
    inv_bw2: f64,
}

impl Kernel {
    fn new(bins: usize, bandwidth: f64) -> Self {
        Self {
            centers: (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect(),
            inv_bw2: 1.0 / (bandwidth * bandwidth),
        }
    }

    fn weights(&self, x: f64, out: &mut [f64]) {
        let mut zmax = f64::NEG_INFINITY;
        for (o, &cb) in out.iter_mut().zip(&self.centers) {
            *o = -0.5 * (x - cb) * (x - cb) * self.inv_bw2;
            zmax = zmax.max(*o);
        }
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - zmax).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
}

pub fn soft_histogram(
    f: &FeatureMap,
    bins: usize,
    bandwidth: f64,
) -> Result<SoftHistogram, EnhanceError> {
    check_histogram_params(bins, bandwidth)?;
    let kernel = Kernel::new(bins, bandwidth);
    let c = f.c;
    let mut mass = vec![0.0; c * bins];
    let mut w = vec![0.0; bins];
    for px in f.pixels() {
        for (ch, &x) in px.iter().enumerate() {
            kernel.weights(x, &mut w);
            for (m, wb) in mass[ch * bins..(ch + 1) * bins].iter_mut().zip(&w) {
                *m += wb;
            }
        }
    }
    let inv = 1.0 / f.positions() as f64;
    mass.iter_mut().for_each(|m| *m *= inv);
    Ok(SoftHistogram {
        bins,
        bandwidth,
        mass,
    })
}

/// Color histogram loss `sum_c sum_b H(F̂) log(H(F̂) / (H(F) + tau))`.
/// The reference histogram is a constant; only `fhat` receives gradients.
pub fn loss_ccl(
    fhat: &FeatureMap,
    f: &FeatureMap,
    tau: f64,
    bins: usize,
    bandwidth: f64,
) -> Result<Loss<FeatureMap>, EnhanceError> {
    if fhat.c != f.c {
        return Err(shape_error(fhat, f));
    }
    if !(tau > 0.0) {
        return Err(EnhanceError::InvalidParam(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let h = soft_histogram(fhat, bins, bandwidth)?;
    let r = soft_histogram(f, bins, bandwidth)?;
    let mut value = 0.0;
    // dV/dH_b; empty bins contribute neither value nor a finite slope
    let dv: Vec<f64> = h
        .mass
        .iter()
        .zip(&r.mass)
        .map(|(&p, &q)| {
            if p > 0.0 {
                let lr = (p / (q + tau)).ln();
                value += p * lr;
                lr + 1.0
            } else {
                0.0
            }
        })
        .collect();

    let kernel = Kernel::new(bins, bandwidth);
    let inv_n = 1.0 / fhat.positions() as f64;
    let mut w = vec![0.0; bins];
    let mut grad = Vec::with_capacity(fhat.data.len());
    for px in fhat.pixels() {
        for (ch, &x) in px.iter().enumerate() {
            kernel.weights(x, &mut w);
            let dvc = &dv[ch * bins..(ch + 1) * bins];
            // dw_b/dx = w_b (z'_b - sum_j w_j z'_j), z'_b = -(x - c_b) / bw^2
            let (mut gw_dz, mut gw, mut w_dz) = (0.0, 0.0, 0.0);
            for b in 0..bins {
                let dz = -(x - kernel.centers[b]) * kernel.inv_bw2;
                gw_dz += dvc[b] * w[b] * dz;
                gw += dvc[b] * w[b];
                w_dz += w[b] * dz;
            }
            grad.push((gw_dz - gw * w_dz) * inv_n);
        }
    }
    Ok(Loss {
        value,
        grad: fhat.with_data(grad)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingStage {
    One,
    Two,
}

/// Loss terms available to [`stage_losses`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageParts {
    pub con: Option<f64>,
    pub icl: Option<f64>,
    pub cdl: Option<f64>,
    pub ccl: Option<f64>,
    pub lambda: f64,
}

impl Default for StageParts {
    fn default() -> Self {
        Self {
            con: None,
            icl: None,
            cdl: None,
            ccl: None,
            lambda: LAMBDA_CCL,
        }
    }
}

/// Stage one: `L_con + L_icl`. Stage two: `L_cdl + lambda * L_ccl`.
pub fn stage_losses(stage: TrainingStage, parts: &StageParts) -> Result<f64, EnhanceError> {
    let need = |v: Option<f64>, name| v.ok_or(EnhanceError::MissingPart(name));
    Ok(match stage {
        TrainingStage::One => need(parts.con, "con")? + need(parts.icl, "icl")?,
        TrainingStage::Two => need(parts.cdl, "cdl")? + parts.lambda * need(parts.ccl, "ccl")?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: GRADCHECK_STEP,
            coords: GRADCHECK_COORDS,
            seed: 0,
        }
    }
}

/// Max relative error `|fd - g| / max(|g|, 1e-8)` of central differences
/// against `grad`, over `opts.coords` coordinates drawn without replacement
/// (every coordinate when there are fewer).
pub fn finite_diff_check<F>(
    f: F,
    x: &[f64],
    grad: &[f64],
    opts: GradCheck,
) -> Result<f64, EnhanceError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if x.len() != grad.len() {
        return Err(EnhanceError::ShapeMismatch(vec![x.len()], vec![grad.len()]));
    }
    if !(opts.step > 0.0) {
        return Err(EnhanceError::InvalidParam(format!(
            "step must be positive, got {}",
            opts.step
        )));
    }
    let coords: Vec<usize> = if x.len() <= opts.coords {
        (0..x.len()).collect()
    } else {
        let mut picked = sample(
            &mut ChaCha8Rng::seed_from_u64(opts.seed),
            x.len(),
            opts.coords,
        )
        .into_vec();
        picked.sort_unstable();
        picked
    };
    let errors = coords
        .par_iter()
        .map_init(
            || x.to_vec(),
            |probe, &i| {
                probe[i] = x[i] + opts.step;
                let up = f(probe);
                probe[i] = x[i] - opts.step;
                let down = f(probe);
                probe[i] = x[i];
                let fd = (up - down) / (2.0 * opts.step);
                if !fd.is_finite() || !grad[i].is_finite() {
                    return Err(EnhanceError::NonFiniteValue(i));
                }
                Ok((fd - grad[i]).abs() / grad[i].abs().max(1e-8))
            },
        )
        .collect::<Result<Vec<_>, _>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}
