//! Paired-to-paired extremely-low-light RAW synthesis and the numerical core
//! of a diffusion-based RAW-to-sRGB enhancement framework.
//!
//! - [`imaging`]: RAW/sRGB data model, SIEDRAW1 and PPM I/O, the fixed ISP.
//! - [`illumination`]: exposure statistic, alignment, luma histograms, η search.
//! - [`noise`]: Poisson-Gaussian calibration, dark-frame bank, noise injection.
//! - [`synth`]: pair synthesis, dataset build and verification.
//! - [`diffusion`]: schedules, forward/reverse steps, DDIM sampling, GMM oracle.
//! - [`enhance`]: Retinex decomposition, training losses, AICM, gradient checks.
//! - [`metrics`]: PSNR and SSIM.

pub mod diffusion;
pub mod enhance;
pub mod illumination;
pub mod imaging;
pub mod metrics;
pub mod noise;
pub mod rng;
pub mod synth;
