use std::f64::consts::PI;

use num_complex::Complex64;

use crate::{CoreError, Result};

/// Complex coil sensitivity maps, coil-major, sum-of-squares normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    n_coils: usize,
    height: usize,
    width: usize,
    maps: Vec<Complex64>,
}

impl SensitivityMaps {
    pub fn new(n_coils: usize, height: usize, width: usize, maps: Vec<Complex64>) -> Result<Self> {
        if maps.len() != n_coils * height * width {
            return Err(CoreError::dimension(
                "sensitivity map length",
                n_coils * height * width,
                maps.len(),
            ));
        }
        Ok(Self {
            n_coils,
            height,
            width,
            maps,
        })
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        let n = self.height * self.width;
        &self.maps[c * n..(c + 1) * n]
    }

    /// `sum_c |S_c(p)|^2` at every pixel.
    pub fn sum_of_squares(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n)
            .map(|p| (0..self.n_coils).map(|c| self.maps[c * n + p].norm_sqr()).sum())
            .collect()
    }
}

/// Smooth Gaussian-lobe coil profiles centred on equispaced points of the
/// image border, each with a slowly varying phase, normalized so that the
/// coil energies sum to one at every pixel.
pub fn synth_sensitivities(height: usize, width: usize, n_coils: usize) -> Result<SensitivityMaps> {
    if n_coils == 0 {
        return Err(CoreError::InvalidConfig("n_coils must be >= 1".into()));
    }
    let n = height * width;
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let size = height.max(width) as f64;
    let spread = 0.6 * size;
    let mut maps = vec![Complex64::new(0.0, 0.0); n_coils * n];
    for c in 0..n_coils {
        let angle = 2.0 * PI * c as f64 / n_coils as f64;
        let (sin, cos) = angle.sin_cos();
        let py = cy + sin * height as f64 / 2.0;
        let px = cx + cos * width as f64 / 2.0;
        for y in 0..height {
            for x in 0..width {
                let dy = y as f64 - py;
                let dx = x as f64 - px;
                let mag = (-(dy * dy + dx * dx) / (2.0 * spread * spread)).exp();
                let phase = angle + 0.5 * PI * (dy * cos - dx * sin) / size;
                maps[c * n + y * width + x] = Complex64::from_polar(mag, phase);
            }
        }
    }
    for p in 0..n {
        let sos: f64 = (0..n_coils).map(|c| maps[c * n + p].norm_sqr()).sum::<f64>().sqrt();
        for c in 0..n_coils {
            maps[c * n + p] /= sos;
        }
    }
    SensitivityMaps::new(n_coils, height, width, maps)
}
