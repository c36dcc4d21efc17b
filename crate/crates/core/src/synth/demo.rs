//! Deterministic stand-ins for sensor data: procedural scenes and a
//! plausible ISO-dependent noise model.

use rand::Rng;
use rayon::prelude::*;

use crate::illumination::{align_exposure, IlluminationError};
use crate::imaging::{BayerFrame, Cfa, FrameMeta};
use crate::noise::{add_noise, fit_iso_model, NoiseError, NoiseModel, NoiseOptions};
use crate::rng::{RngStream, Stage};

pub fn meta() -> FrameMeta {
    FrameMeta {
        cfa: Cfa::Rggb,
        black_level: 512,
        white_level: 16383,
        iso: 100.0,
        exposure_s: 0.01,
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r2: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Shape::Disc { cx, cy, r2 } => (x - cx).powi(2) + (y - cy).powi(2) <= r2,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// Normally exposed RGGB capture of a procedural scene: a shaded backdrop
/// with occluding discs and rectangles, vignetting and fine texture.
pub fn scene(width: u32, height: u32, seed: u64) -> BayerFrame {
    let m = meta();
    let stream = RngStream::new(seed, 0).stage(Stage::Scene);
    let mut rng = stream.rng();
    let backdrop: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.5));
    let tilt: (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let exposure = rng.random_range(0.35..0.6);
    let mut objects = Vec::new();
    for _ in 0..rng.random_range(6..14) {
        let (cx, cy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let size: f64 = rng.random_range(0.05..0.3);
        let shape = if rng.random_bool(0.5) {
            Shape::Disc {
                cx,
                cy,
                r2: size * size,
            }
        } else {
            Shape::Rect {
                x0: cx - size,
                y0: cy - 0.6 * size,
                x1: cx + size,
                y1: cy + 0.6 * size,
            }
        };
        let albedo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.95));
        objects.push((shape, albedo));
    }
    let freq = rng.random_range(20.0..80.0);

    let (w, h) = (width as usize, height as usize);
    let range = f64::from(m.white_level - m.black_level);
    let layout = m.cfa.layout();
    let site = |row: usize, col: usize| -> usize {
        let rc = (row % 2, col % 2);
        if rc == layout.red {
            0
        } else if rc == layout.blue {
            2
        } else {
            1
        }
    };
    let mut data = vec![0u16; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let mut grain = stream.derive(row as u64).rng();
        let y = (row as f64 + 0.5) / h as f64;
        for (col, o) in out.iter_mut().enumerate() {
            let x = (col as f64 + 0.5) / w as f64;
            let c = site(row, col);
            let albedo = objects.iter().rev().find(|(s, _)| s.contains(x, y)).map_or(
                backdrop[c] * (1.0 + tilt.0 * (x - 0.5) + tilt.1 * (y - 0.5)),
                |(_, a)| a[c],
            );
            let r2 = (x - 0.5).powi(2) + (y - 0.5).powi(2);
            let light =
                exposure * (1.0 - 0.8 * r2) * (1.0 + 0.05 * (freq * x).sin() * (freq * y).cos());
            let v = (albedo * light * grain.random_range(0.97..1.03)).clamp(0.0, 1.0);
            *o = m.black_level + (v * range).round() as u16;
        }
    });
    BayerFrame::new(width, height, m, data).expect("valid demo frame")
}

/// A stand-in laboratory frame of the scene in `cap`: darkened to
/// `expo_target` and noised at `iso` with a stream of its own.
pub fn planted_standard(
    cap: &BayerFrame,
    expo_target: f64,
    iso: f64,
    model: &NoiseModel,
    seed: u64,
) -> Result<BayerFrame, PlantError> {
    let dark = align_exposure(cap, expo_target, 0.0)?.frame;
    Ok(add_noise(
        &dark,
        iso,
        model,
        RngStream::new(seed, 0).stage(Stage::Scene),
        NoiseOptions::default(),
    )?)
}

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error(transparent)]
    Illumination(#[from] IlluminationError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// Gain `0.04 * (iso/100)` DN per electron and read noise
/// `1.5 * (iso/100)^0.5` DN, fitted from two calibration points.
pub fn noise_model() -> NoiseModel {
    let gain = |iso: f64| 0.04 * iso / 100.0;
    let read = |iso: f64| 1.5 * (iso / 100.0).sqrt();
    let isos = [100.0, 25_600.0];
    fit_iso_model(&isos.map(|i| (i, gain(i))), &isos.map(|i| (i, read(i))))
        .expect("positive points")
}
