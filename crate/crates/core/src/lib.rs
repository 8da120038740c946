//! Randomized smoothing inside an unrolled MoDL-style MRI reconstructor.
//!
//! The crate is organised along the reconstruction pipeline:
//!
//! * [`mri`]: Cartesian sampling masks, synthetic coil sensitivities, the
//!   multi-coil forward operator and the conjugate-gradient data-consistency
//!   solve with its implicit gradient.
//! * [`phantom`] and [`dataset`]: synthetic targets, simulated k-space and the
//!   on-disk dataset format.
//! * [`denoiser`]: the small residual CNN used as the learned prior.
//! * [`unrolling`]: vanilla, RS-E2E, SMUGv0 and SMUG reconstructions.
//! * [`training`]: pre-training, UStab fine-tuning, Adam and training loops.
//! * [`robustness`]: PSNR/SSIM, the PGD attack and robustness sweeps.

pub mod container;
pub mod dataset;
pub mod denoiser;
mod error;
mod image;
pub mod mri;
pub mod phantom;
pub mod robustness;
pub mod training;
pub mod unrolling;

pub use error::CoreError;
pub use image::{ComplexImage, KSpaceData};
pub use num_complex::Complex64;

pub type Result<T> = std::result::Result<T, CoreError>;

/// Deterministic 64-bit mixing of a seed with a stream of indices.
///
/// Used to derive independent RNG seeds for samples, epochs and noise draws.
pub fn derive_seed(seed: u64, indices: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &i in indices {
        h ^= i.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finaliser
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
