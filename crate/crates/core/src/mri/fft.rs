use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Centered, orthonormal 2-D DFT.
///
/// The zero frequency sits at index `(h/2, w/2)` and the transform is scaled
/// by `1/sqrt(h*w)`, which makes it unitary.
#[derive(Clone)]
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fft2({}x{})", self.height, self.width)
    }
}

fn circular_shift(data: &[Complex64], h: usize, w: usize, sy: usize, sx: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for y in 0..h {
        let ty = (y + sy) % h;
        for x in 0..w {
            out[ty * w + (x + sx) % w] = data[y * w + x];
        }
    }
    out
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "fft buffer size");
        // ifftshift, transform, fftshift
        let mut buf = circular_shift(data, h, w, h - h / 2, w - w / 2);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(&mut buf);
        let mut transposed = vec![Complex64::new(0.0, 0.0); h * w];
        for y in 0..h {
            for x in 0..w {
                transposed[x * h + y] = buf[y * w + x];
            }
        }
        col.process(&mut transposed);
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = transposed[x * h + y] * scale;
            }
        }
        let shifted = circular_shift(&buf, h, w, h / 2, w / 2);
        data.copy_from_slice(&shifted);
    }
}
