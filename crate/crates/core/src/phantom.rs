//! Piecewise-smooth synthetic targets.
//!
//! A phantom is a sum of filled ellipses (a large "body" ellipse plus smaller
//! inclusions inside it) modulated by a smooth quadratic phase. Magnitudes are
//! scaled so the brightest pixel is exactly 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Complex64, ComplexImage, CoreError, Result};

pub const MIN_ELLIPSES: usize = 3;
pub const MAX_ELLIPSES: usize = 8;

/// Ellipse in normalized coordinates, `[-1, 1]` across each image axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let a = (du * c + dv * s) / self.radii.0;
        let b = (-du * s + dv * c) / self.radii.1;
        a * a + b * b <= 1.0
    }
}

/// Everything needed to redraw a phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
    /// Coefficients of `1, u, v, uv, u^2, v^2` in the phase (radians).
    pub phase: [f64; 6],
}

pub fn generate_phantom(height: usize, width: usize, seed: u64) -> Result<ComplexImage> {
    generate_phantom_with_meta(height, width, seed).map(|(img, _)| img)
}

pub fn generate_phantom_with_meta(
    height: usize,
    width: usize,
    seed: u64,
) -> Result<(ComplexImage, PhantomMeta)> {
    if height < 8 || width < 8 {
        return Err(CoreError::InvalidConfig(format!(
            "phantom size must be at least 8x8, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(MIN_ELLIPSES..=MAX_ELLIPSES);

    let intensities = distinct_intensities(&mut rng, count);
    let body = Ellipse {
        center: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
        radii: (rng.random_range(0.65..0.9), rng.random_range(0.55..0.85)),
        angle: rng.random_range(-0.4..0.4),
        intensity: intensities[0],
    };
    let mut ellipses = vec![body];
    for &intensity in &intensities[1..] {
        let r = rng.random_range(0.0..0.45);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        ellipses.push(Ellipse {
            center: (r * theta.cos(), r * theta.sin()),
            radii: (rng.random_range(0.08..0.35), rng.random_range(0.08..0.35)),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity,
        });
    }
    let phase = [
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    let meta = PhantomMeta {
        seed,
        ellipses,
        phase,
    };
    Ok((render(height, width, &meta), meta))
}

fn distinct_intensities(rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(count);
    while out.len() < count {
        let v: f64 = rng.random_range(0.1..1.0);
        if out.iter().all(|o| (o - v).abs() >= 0.05) {
            out.push(v);
        }
    }
    out
}

/// Draws the phantom described by `meta`.
pub fn render(height: usize, width: usize, meta: &PhantomMeta) -> ComplexImage {
    let coord = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    let mut magnitude: Vec<f64> = (0..height * width)
        .map(|p| {
            let (v, u) = (coord(p / width, height), coord(p % width, width));
            meta.ellipses
                .iter()
                .filter(|e| e.contains(u, v))
                .map(|e| e.intensity)
                .sum()
        })
        .collect();
    let peak = magnitude.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        magnitude.iter_mut().for_each(|m| *m /= peak);
    }
    let c = &meta.phase;
    ComplexImage::from_fn(height, width, |y, x| {
        let (v, u) = (coord(y, height), coord(x, width));
        let phi = c[0] + c[1] * u + c[2] * v + c[3] * u * v + c[4] * u * u + c[5] * v * v;
        Complex64::from_polar(magnitude[y * width + x], phi)
    })
}
