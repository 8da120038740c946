//! Acquisition physics: masks, coil sensitivities, the multi-coil Fourier
//! operator and the data-consistency solve.

mod acquisition;
mod dc;
mod fft;
mod mask;
mod sensitivity;

pub use acquisition::AcquisitionModel;
pub use dc::{
    cg_solve, dc_grad_operator, dc_solve, dc_solve_grad, dc_solve_on_tape, dc_solve_with_rhs,
    CgOutcome, DcSettings, DcSolution, DcStats,
};
pub use fft::Fft2;
pub use mask::{build_cartesian_mask, SamplingMask};
pub use sensitivity::{synth_sensitivities, SensitivityMaps};
