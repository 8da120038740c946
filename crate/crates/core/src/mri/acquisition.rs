use std::sync::Arc;

use num_complex::Complex64;

use super::{Fft2, SamplingMask, SensitivityMaps};
use crate::{ComplexImage, CoreError, KSpaceData, Result};

/// Multi-coil Cartesian acquisition `A = M F S_c` with a centered unitary DFT.
#[derive(Clone, Debug)]
pub struct AcquisitionModel {
    mask: SamplingMask,
    row_kept: Vec<bool>,
    sens: Arc<SensitivityMaps>,
    fft: Arc<Fft2>,
}

impl AcquisitionModel {
    pub fn new(mask: SamplingMask, sens: SensitivityMaps) -> Result<Self> {
        mask.validate()?;
        let (h, w) = sens.dims();
        if (mask.height, mask.width) != (h, w) {
            return Err(CoreError::dimension(
                "mask dimensions vs sensitivity maps",
                format!("{h}x{w}"),
                format!("{}x{}", mask.height, mask.width),
            ));
        }
        Ok(Self {
            row_kept: mask.row_flags(),
            mask,
            sens: Arc::new(sens),
            fft: Arc::new(Fft2::new(h, w)),
        })
    }

    /// Same coils and FFT plans, different mask.
    pub fn with_mask(&self, mask: SamplingMask) -> Result<Self> {
        mask.validate()?;
        if (mask.height, mask.width) != self.dims() {
            return Err(CoreError::dimension(
                "mask dimensions",
                format!("{}x{}", self.height(), self.width()),
                format!("{}x{}", mask.height, mask.width),
            ));
        }
        Ok(Self {
            row_kept: mask.row_flags(),
            mask,
            sens: Arc::clone(&self.sens),
            fft: Arc::clone(&self.fft),
        })
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn sensitivities(&self) -> &SensitivityMaps {
        &self.sens
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.mask.height, self.mask.width)
    }

    pub fn n_coils(&self) -> usize {
        self.sens.n_coils()
    }

    fn check_image(&self, x: &ComplexImage) -> Result<()> {
        if x.dims() != self.dims() {
            return Err(CoreError::dimension(
                "image dimensions",
                format!("{}x{}", self.height(), self.width()),
                format!("{}x{}", x.height(), x.width()),
            ));
        }
        Ok(())
    }

    fn zero_unsampled(&self, kspace: &mut [Complex64]) {
        let w = self.width();
        for (row, kept) in kspace.chunks_mut(w).zip(&self.row_kept) {
            if !kept {
                row.fill(Complex64::new(0.0, 0.0));
            }
        }
    }

    fn coil_forward(&self, c: usize, x: &[Complex64], out: &mut [Complex64]) {
        for ((o, s), v) in out.iter_mut().zip(self.sens.coil(c)).zip(x) {
            *o = s * v;
        }
        self.fft.forward(out);
        self.zero_unsampled(out);
    }

    fn coil_adjoint_accumulate(&self, c: usize, kspace: &[Complex64], acc: &mut [Complex64]) {
        let mut buf = kspace.to_vec();
        self.zero_unsampled(&mut buf);
        self.fft.inverse(&mut buf);
        for ((a, s), v) in acc.iter_mut().zip(self.sens.coil(c)).zip(&buf) {
            *a += s.conj() * v;
        }
    }

    /// `y_c = M F (S_c x)` for every coil.
    pub fn forward(&self, x: &ComplexImage) -> Result<KSpaceData> {
        self.check_image(x)?;
        let (h, w) = self.dims();
        let mut y = KSpaceData::zeros(self.n_coils(), h, w);
        for c in 0..self.n_coils() {
            self.coil_forward(c, x.data(), y.coil_mut(c));
        }
        Ok(y)
    }

    /// `sum_c conj(S_c) F^-1 (M y_c)`.
    pub fn adjoint(&self, y: &KSpaceData) -> Result<ComplexImage> {
        if (y.coils(), y.height(), y.width()) != (self.n_coils(), self.height(), self.width()) {
            return Err(CoreError::dimension(
                "k-space dimensions (coils x height x width)",
                format!("{}x{}x{}", self.n_coils(), self.height(), self.width()),
                format!("{}x{}x{}", y.coils(), y.height(), y.width()),
            ));
        }
        let (h, w) = self.dims();
        let mut x = ComplexImage::zeros(h, w);
        for c in 0..self.n_coils() {
            self.coil_adjoint_accumulate(c, y.coil(c), x.data_mut());
        }
        Ok(x)
    }

    /// `A^H A x`, evaluated coil by coil in a fixed order.
    pub fn normal(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = self.height() * self.width();
        assert_eq!(x.len(), n, "normal operator input size");
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..self.n_coils() {
            self.coil_forward(c, x, &mut buf);
            self.coil_adjoint_accumulate(c, &buf, &mut acc);
        }
        acc
    }
}
