use num_complex::Complex64;
use smug_autodiff::Tensor;

use crate::{CoreError, Result};

/// 2-D complex image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::dimension(
                "complex image data length",
                height * width,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds an image from interleaved `(re, im)` pairs.
    pub fn from_interleaved(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != 2 * height * width {
            return Err(CoreError::dimension(
                "interleaved complex length",
                2 * height * width,
                values.len(),
            ));
        }
        let data = values
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn interleaved(&self) -> Vec<f64> {
        self.data.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    /// `[H, W, 2]` real tensor with the real and imaginary parts in the last axis.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.height, self.width, 2], self.interleaved()).expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, 2] => Self::from_interleaved(h, w, t.data()),
            _ => Err(CoreError::dimension(
                "complex tensor shape",
                "[H, W, 2]",
                format!("{:?}", t.shape()),
            )),
        }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Real part of the inner product `<self, other>`.
    pub fn dot_re(&self, other: &ComplexImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    pub fn add(&self, other: &ComplexImage) -> ComplexImage {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ComplexImage) -> ComplexImage {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> ComplexImage {
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|c| c * factor).collect(),
        }
    }

    fn zip_map(&self, other: &ComplexImage, f: impl Fn(Complex64, Complex64) -> Complex64) -> ComplexImage {
        debug_assert_eq!(self.dims(), other.dims());
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn max_abs_component(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0, |m, c| m.max(c.re.abs()).max(c.im.abs()))
    }
}

/// Per-coil k-space measurements, coil-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    coils: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl KSpaceData {
    pub fn new(coils: usize, height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != coils * height * width {
            return Err(CoreError::dimension(
                "k-space data length",
                coils * height * width,
                data.len(),
            ));
        }
        Ok(Self {
            coils,
            height,
            width,
            data,
        })
    }

    pub fn zeros(coils: usize, height: usize, width: usize) -> Self {
        Self {
            coils,
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); coils * height * width],
        }
    }

    pub fn coils(&self) -> usize {
        self.coils
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn coil(&self, c: usize) -> &[Complex64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn coil_mut(&mut self, c: usize) -> &mut [Complex64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn dot_re(&self, other: &KSpaceData) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }
}
