//! Diffusion schedules, forward noising, ancestral and DDIM reverse steps,
//! and a closed-form Gaussian-mixture posterior-mean denoiser.
//!
//! Step indices run over `1..=T`. Index 0 is the clean-data convention:
//! `alpha_bar(0) = 1`, so `alpha_bar(t) = prod_{i=1..t} alpha_i`.
//!
//! The denoiser predicts the clean sample `x0`; the noise estimate needed by
//! the ancestral mean is recovered with [`x0_to_eps`].

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{RngStream, Stage};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_SAMPLING_STEPS: usize = 20;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: need T >= 2 and 0 < beta_start < beta_end < 1, got T={steps}, [{start}, {end}]")]
    InvalidRange { steps: usize, start: f64, end: f64 },
    #[error("tensor shapes {0:?} and {1:?} differ")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("target step {t_prev} must precede {t}")]
    StepOrderViolation { t: usize, t_prev: usize },
    #[error("need at least one sampling step")]
    NoSteps,
    #[error("component {0} covariance is not positive definite")]
    SingularCovariance(usize),
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
}

/// Variance schedule with derived coefficient tables, indexed `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// Linearly spaced betas over `steps` steps.
pub fn linear_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidRange {
            steps,
            start: beta_start,
            end: beta_end,
        });
    }
    let mut beta = vec![0.0; steps + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64;
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    let mut posterior_var = vec![0.0; steps + 1];
    for t in 1..=steps {
        posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
    }
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule")
    }
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `(1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]`; zero at t = 1.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if (1..=self.steps).contains(&t) {
            Ok(())
        } else {
            Err(DiffusionError::StepOutOfRange { t, max: self.steps })
        }
    }
}

/// Latent tensor: row-major f64 with an explicit shape, e.g. `(n, d)` or `(h, w, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffusionError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DiffusionError::ShapeMismatch(shape, vec![data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    /// Width of the last axis; rows are `data.chunks(row_len())`.
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn same_shape(&self, other: &Tensor) -> Result<(), DiffusionError> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(DiffusionError::ShapeMismatch(
                self.shape.clone(),
                other.shape.clone(),
            ))
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`
pub fn q_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    s: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    x0.same_shape(eps)?;
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Noise implied by a clean-sample prediction at step `t`.
pub fn x0_to_eps(
    x0hat: &Tensor,
    xt: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    x0hat.same_shape(xt)?;
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok(xt.zip_map(x0hat, |x, x0| (x - a * x0) / b))
}

/// Mean of the reverse transition in noise-prediction form.
pub fn ancestral_mean(
    xt: &Tensor,
    x0hat: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    let eps = x0_to_eps(x0hat, xt, t, s)?;
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    let inv = 1.0 / s.alpha(t).sqrt();
    Ok(xt.zip_map(&eps, |x, e| inv * (x - coef * e)))
}

/// One stochastic reverse step `x_t -> x_{t-1}`. No noise is added at t = 1.
pub fn ancestral_step<R: Rng + ?Sized>(
    xt: &Tensor,
    x0hat: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor, DiffusionError> {
    let mut mean = ancestral_mean(xt, x0hat, t, s)?;
    if t > 1 {
        let sigma = s.posterior_var(t).sqrt();
        for v in &mut mean.data {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Ok(mean)
}

/// Deterministic DDIM update `x_t -> x_{t_prev}`; `t_prev = 0` returns `x0hat`.
pub fn ddim_step(
    xt: &Tensor,
    x0hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    if t_prev >= t {
        return Err(DiffusionError::StepOrderViolation { t, t_prev });
    }
    let eps = x0_to_eps(x0hat, xt, t, s)?;
    let (a, b) = (
        s.alpha_bar(t_prev).sqrt(),
        (1.0 - s.alpha_bar(t_prev)).sqrt(),
    );
    Ok(x0hat.zip_map(&eps, |x0, e| a * x0 + b * e))
}

/// Uniformly strided visit order, e.g. `1000, 950, ..., 50` for 20 of 1000.
/// The final hop from the last entry goes to 0.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Vec<usize> {
    (1..=steps)
        .rev()
        .map(|k| (k * train_steps).div_ceil(steps))
        .collect()
}

/// Clean-sample predictor `(x_t, t, condition) -> x0hat`.
pub trait Denoiser {
    fn predict_x0(
        &self,
        xt: &Tensor,
        t: usize,
        condition: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize, Option<&Tensor>) -> Tensor,
{
    fn predict_x0(
        &self,
        xt: &Tensor,
        t: usize,
        condition: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError> {
        Ok(self(xt, t, condition))
    }
}

/// DDIM sampling from a standard-normal start over `steps` strided steps.
pub fn sample(
    denoiser: &dyn Denoiser,
    condition: Option<&Tensor>,
    shape: &[usize],
    steps: usize,
    s: &DiffusionSchedule,
    rng: RngStream,
) -> Result<Tensor, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::NoSteps);
    }
    let mut x = Tensor::standard_normal(shape, &mut rng.stage(Stage::Latent).rng());
    let visits = ddim_timesteps(s.steps(), steps.min(s.steps()));
    for (i, &t) in visits.iter().enumerate() {
        let t_prev = visits.get(i + 1).copied().unwrap_or(0);
        let x0hat = denoiser.predict_x0(&x, t, condition)?;
        x = ddim_step(&x, &x0hat, t, t_prev, s)?;
    }
    Ok(x)
}

/// Full ancestral sampling over every step `T..=1`.
pub fn sample_ancestral(
    denoiser: &dyn Denoiser,
    condition: Option<&Tensor>,
    shape: &[usize],
    s: &DiffusionSchedule,
    rng: RngStream,
) -> Result<Tensor, DiffusionError> {
    let mut x = Tensor::standard_normal(shape, &mut rng.stage(Stage::Latent).rng());
    let mut noise = rng.stage(Stage::Ancestral).rng();
    for t in (1..=s.steps()).rev() {
        let x0hat = denoiser.predict_x0(&x, t, condition)?;
        x = ancestral_step(&x, &x0hat, t, s, &mut noise)?;
    }
    Ok(x)
}

/// Gaussian mixture over `d`-dimensional vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, DiffusionError> {
        let gmm = Self {
            weights,
            means,
            covariances,
        };
        gmm.validate()?;
        Ok(gmm)
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let k = self.weights.len();
        let d = self.dim();
        if k == 0 || d == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(DiffusionError::InvalidMixture(format!(
                "{k} weights, {} means, {} covariances",
                self.means.len(),
                self.covariances.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0))
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(DiffusionError::InvalidMixture(
                "weights must be nonnegative and sum to 1".into(),
            ));
        }
        for i in 0..k {
            let cov = &self.covariances[i];
            if self.means[i].len() != d || cov.len() != d || cov.iter().any(|r| r.len() != d) {
                return Err(DiffusionError::InvalidMixture(format!(
                    "component {i} has inconsistent dimensions"
                )));
            }
            for r in 0..d {
                for c in 0..r {
                    if (cov[r][c] - cov[c][r]).abs() > 1e-12 {
                        return Err(DiffusionError::InvalidMixture(format!(
                            "component {i} covariance not symmetric"
                        )));
                    }
                }
            }
            Cholesky::new(self.cov(i)).ok_or(DiffusionError::SingularCovariance(i))?;
        }
        Ok(())
    }

    pub fn mean(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.means[k])
    }

    pub fn cov(&self, k: usize) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |r, c| self.covariances[k][r][c])
    }

    /// Ancestral draws, one row per sample.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let factors: Vec<DMatrix<f64>> = (0..self.components())
            .map(|k| Cholesky::new(self.cov(k)).expect("validated").l())
            .collect();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = self.weights[0];
            while u >= acc && k + 1 < self.components() {
                k += 1;
                acc += self.weights[k];
            }
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = self.mean(k) + &factors[k] * z;
            data.extend(x.iter());
        }
        Tensor {
            shape: vec![n, d],
            data,
        }
    }

    /// Hard assignment of each row to its most responsible component.
    pub fn classify(&self, x: &Tensor) -> Vec<usize> {
        let d = self.dim();
        let comps: Vec<_> = (0..self.components())
            .map(|k| {
                let chol = Cholesky::new(self.cov(k)).expect("validated");
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                (chol, logdet)
            })
            .collect();
        x.data
            .chunks(d)
            .map(|row| {
                let v = DVector::from_column_slice(row);
                (0..self.components())
                    .map(|k| {
                        let diff = &v - self.mean(k);
                        let m = diff.dot(&comps[k].0.solve(&diff));
                        self.weights[k].ln() - 0.5 * (m + comps[k].1)
                    })
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .unwrap_or(0)
            })
            .collect()
    }
}

struct NoisedComponent {
    log_weight: f64,
    shifted_mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    mean: DVector<f64>,
    /// `sqrt(alpha_bar) * Sigma`
    gain: DMatrix<f64>,
}

/// Exact `E[x0 | x_t]` for mixture data, one prediction per row of `xt`.
pub fn gmm_posterior_denoiser(
    gmm: &GaussianMixture,
    xt: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
) -> Result<Tensor, DiffusionError> {
    let d = gmm.dim();
    if xt.row_len() != d || xt.data.len() % d != 0 {
        return Err(DiffusionError::ShapeMismatch(xt.shape.clone(), vec![d]));
    }
    if t > s.steps() {
        return Err(DiffusionError::StepOutOfRange { t, max: s.steps() });
    }
    let ab = s.alpha_bar(t);
    let sa = ab.sqrt();
    let comps = (0..gmm.components())
        .map(|k| {
            let sigma = gmm.cov(k);
            let noised = &sigma * ab + DMatrix::identity(d, d) * (1.0 - ab);
            let chol = Cholesky::new(noised).ok_or(DiffusionError::SingularCovariance(k))?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            Ok(NoisedComponent {
                log_weight: gmm.weights[k].ln(),
                shifted_mean: gmm.mean(k) * sa,
                chol,
                log_det,
                mean: gmm.mean(k),
                gain: sigma * sa,
            })
        })
        .collect::<Result<Vec<_>, DiffusionError>>()?;

    let mut out = vec![0.0; xt.data.len()];
    out.par_chunks_mut(d)
        .zip(xt.data.par_chunks(d))
        .for_each(|(o, row)| {
            let x = DVector::from_column_slice(row);
            let mut logits = Vec::with_capacity(comps.len());
            let mut preds = Vec::with_capacity(comps.len());
            for c in &comps {
                let diff = &x - &c.shifted_mean;
                let solved = c.chol.solve(&diff);
                logits.push(c.log_weight - 0.5 * (diff.dot(&solved) + c.log_det));
                preds.push(&c.mean + &c.gain * solved);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (j, v) in o.iter_mut().enumerate() {
                *v = weights
                    .iter()
                    .zip(&preds)
                    .map(|(w, p)| w * p[j])
                    .sum::<f64>()
                    / total;
            }
        });
    Ok(Tensor {
        shape: xt.shape.clone(),
        data: out,
    })
}

/// [`Denoiser`] adapter around [`gmm_posterior_denoiser`].
pub struct GmmDenoiser<'a> {
    pub gmm: &'a GaussianMixture,
    pub schedule: &'a DiffusionSchedule,
}

impl Denoiser for GmmDenoiser<'_> {
    fn predict_x0(
        &self,
        xt: &Tensor,
        t: usize,
        _condition: Option<&Tensor>,
    ) -> Result<Tensor, DiffusionError> {
        gmm_posterior_denoiser(self.gmm, xt, t, self.schedule)
    }
}

/// CSV dump of an `(n, d)` tensor with an `x0,x1,...` header.
pub fn samples_to_csv(samples: &Tensor) -> String {
    let d = samples.row_len();
    let mut out = (0..d)
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in samples.data.chunks(d) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
