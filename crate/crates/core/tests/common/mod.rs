//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smug_core::mri::{AcquisitionModel, SamplingMask, SensitivityMaps};
use smug_core::{Complex64, ComplexImage, KSpaceData};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ComplexImage {
    ComplexImage::from_fn(h, w, |_, _| {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

pub fn random_kspace(rng: &mut ChaCha8Rng, coils: usize, h: usize, w: usize) -> KSpaceData {
    let data = (0..coils * h * w)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    KSpaceData::new(coils, h, w, data).unwrap()
}

/// Dense encoding matrix from the explicit centered-DFT formula, rows ordered
/// (coil, ky, kx), columns (y, x).
pub fn dense_encoding(mask: &SamplingMask, sens: &SensitivityMaps) -> Vec<Vec<Complex64>> {
    let (h, w) = (mask.height, mask.width);
    let kept = mask.row_flags();
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut rows = Vec::new();
    for c in 0..sens.n_coils() {
        let s = sens.coil(c);
        for ky in 0..h {
            for kx in 0..w {
                let row = (0..h * w)
                    .map(|p| {
                        if !kept[ky] {
                            return Complex64::new(0.0, 0.0);
                        }
                        let (y, x) = (p / w, p % w);
                        let fy = (ky as f64 - (h / 2) as f64) * (y as f64 - (h / 2) as f64) / h as f64;
                        let fx = (kx as f64 - (w / 2) as f64) * (x as f64 - (w / 2) as f64) / w as f64;
                        Complex64::from_polar(scale, -2.0 * PI * (fy + fx)) * s[p]
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    rows
}

pub fn matvec(m: &[Vec<Complex64>], v: &[Complex64]) -> Vec<Complex64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

pub fn adjoint_matvec(m: &[Vec<Complex64>], v: &[Complex64]) -> Vec<Complex64> {
    let cols = m[0].len();
    (0..cols)
        .map(|j| m.iter().zip(v).map(|(row, vi)| row[j].conj() * vi).sum())
        .collect()
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<Complex64>>, mut b: Vec<Complex64>) -> Vec<Complex64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].norm().partial_cmp(&a[j][col].norm()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                let v = a[col][c];
                a[r][c] -= f * v;
            }
            let v = b[col];
            b[r] -= f * v;
        }
    }
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    for r in (0..n).rev() {
        let s: Complex64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// `A^H A + lambda I` from a dense encoding matrix.
pub fn dense_normal(m: &[Vec<Complex64>], lambda: f64) -> Vec<Vec<Complex64>> {
    let n = m[0].len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v: Complex64 = m.iter().map(|row| row[i].conj() * row[j]).sum();
                    if i == j {
                        v + lambda
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

pub fn rel_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    d / n.max(1e-300)
}

pub fn model(h: usize, w: usize, coils: usize, accel: usize, acs: usize, seed: u64) -> AcquisitionModel {
    AcquisitionModel::new(
        smug_core::mri::build_cartesian_mask(h, w, accel, acs, seed).unwrap(),
        smug_core::mri::synth_sensitivities(h, w, coils).unwrap(),
    )
    .unwrap()
}

pub fn unitary_model(h: usize, w: usize) -> AcquisitionModel {
    AcquisitionModel::new(
        SamplingMask::full(h, w),
        smug_core::mri::synth_sensitivities(h, w, 1).unwrap(),
    )
    .unwrap()
}
