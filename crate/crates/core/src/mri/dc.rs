use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smug_autodiff::{LinearOp, NodeId, Tape, Tensor};

use super::AcquisitionModel;
use crate::{ComplexImage, CoreError, KSpaceData, Result};

/// Parameters of the data-consistency solve `(A^H A + lambda I) x = A^H y + lambda z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcSettings {
    pub lambda: f64,
    /// Relative tolerance: stop once `||r|| <= tol * ||rhs||`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DcSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

impl DcSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(CoreError::InvalidConfig(format!("cg tolerance must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<Complex64>,
    pub residual_norm: f64,
    pub rhs_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual norm before the first iteration and after each one.
    pub residual_history: Vec<f64>,
}

fn dot_re(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// Conjugate gradient for a Hermitian positive-definite operator, using the
/// real inner product `Re<u, v>`.
pub fn cg_solve(
    apply: impl Fn(&[Complex64]) -> Vec<Complex64>,
    rhs: &[Complex64],
    x0: &[Complex64],
    tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let rhs_norm = dot_re(rhs, rhs).sqrt();
    if rhs_norm == 0.0 {
        return CgOutcome {
            x: vec![Complex64::new(0.0, 0.0); rhs.len()],
            residual_norm: 0.0,
            rhs_norm,
            iterations: 0,
            converged: true,
            residual_history: vec![0.0],
        };
    }
    let threshold = tol * rhs_norm;
    let mut x = x0.to_vec();
    let ax = apply(&x);
    let mut r: Vec<Complex64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut rr = dot_re(&r, &r);
    let mut history = vec![rr.sqrt()];
    let mut p = r.clone();
    let mut iterations = 0;
    while rr.sqrt() > threshold && iterations < max_iter {
        let ap = apply(&p);
        let curvature = dot_re(&p, &ap);
        if curvature <= 0.0 {
            break;
        }
        let alpha = rr / curvature;
        for ((xi, pi), (ri, api)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        let rr_next = dot_re(&r, &r);
        let beta = rr_next / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
        iterations += 1;
        history.push(rr.sqrt());
    }
    let residual_norm = rr.sqrt();
    CgOutcome {
        x,
        residual_norm,
        rhs_norm,
        iterations,
        converged: residual_norm <= threshold,
        residual_history: history,
    }
}

/// Convergence summary of one data-consistency solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcStats {
    pub residual_norm: f64,
    pub rhs_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct DcSolution {
    pub x: ComplexImage,
    pub stats: DcStats,
    pub residual_history: Vec<f64>,
}

fn check_dims(model: &AcquisitionModel, img: &ComplexImage, what: &str) -> Result<()> {
    if img.dims() != model.dims() {
        return Err(CoreError::dimension(
            what,
            format!("{}x{}", model.height(), model.width()),
            format!("{}x{}", img.height(), img.width()),
        ));
    }
    Ok(())
}

fn regularized_normal(model: &AcquisitionModel, lambda: f64) -> impl Fn(&[Complex64]) -> Vec<Complex64> + '_ {
    move |v| {
        let mut out = model.normal(v);
        for (o, vi) in out.iter_mut().zip(v) {
            *o += lambda * vi;
        }
        out
    }
}

/// Solves the DC system given the precomputed `A^H y`, warm-started at `z`.
pub fn dc_solve_with_rhs(
    model: &AcquisitionModel,
    z: &ComplexImage,
    aty: &ComplexImage,
    settings: &DcSettings,
) -> Result<DcSolution> {
    settings.validate()?;
    check_dims(model, z, "dc_solve z")?;
    check_dims(model, aty, "dc_solve A^H y")?;
    let rhs: Vec<Complex64> = aty
        .data()
        .iter()
        .zip(z.data())
        .map(|(a, zi)| a + settings.lambda * zi)
        .collect();
    let out = cg_solve(
        regularized_normal(model, settings.lambda),
        &rhs,
        z.data(),
        settings.tol,
        settings.max_iter,
    );
    Ok(DcSolution {
        x: ComplexImage::new(model.height(), model.width(), out.x)?,
        stats: DcStats {
            residual_norm: out.residual_norm,
            rhs_norm: out.rhs_norm,
            iterations: out.iterations,
            converged: out.converged,
        },
        residual_history: out.residual_history,
    })
}

/// `argmin_x ||A x - y||^2 + lambda ||x - z||^2`, solved by CG from `x = z`.
pub fn dc_solve(
    model: &AcquisitionModel,
    z: &ComplexImage,
    y: &KSpaceData,
    settings: &DcSettings,
) -> Result<DcSolution> {
    let aty = model.adjoint(y)?;
    dc_solve_with_rhs(model, z, &aty, settings)
}

fn grad_map(model: &AcquisitionModel, settings: &DcSettings, upstream: &[Complex64]) -> Vec<Complex64> {
    let zero = vec![Complex64::new(0.0, 0.0); upstream.len()];
    let out = cg_solve(
        regularized_normal(model, settings.lambda),
        upstream,
        &zero,
        settings.tol,
        settings.max_iter,
    );
    out.x.into_iter().map(|v| v * settings.lambda).collect()
}

/// Gradient of the DC solution with respect to `z`:
/// `lambda (A^H A + lambda I)^-1 g`, computed by a second CG solve.
pub fn dc_solve_grad(
    model: &AcquisitionModel,
    settings: &DcSettings,
    upstream: &ComplexImage,
) -> Result<ComplexImage> {
    settings.validate()?;
    check_dims(model, upstream, "dc_solve_grad upstream")?;
    ComplexImage::new(model.height(), model.width(), grad_map(model, settings, upstream.data()))
}

fn as_complex(values: &[f64]) -> Vec<Complex64> {
    values.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

fn as_interleaved(values: &[Complex64]) -> Vec<f64> {
    values.iter().flat_map(|c| [c.re, c.im]).collect()
}

/// The DC gradient map as a self-adjoint linear operator on `[H, W, 2]` tensors.
pub fn dc_grad_operator(model: &AcquisitionModel, settings: &DcSettings) -> Result<LinearOp> {
    settings.validate()?;
    let model = model.clone();
    let settings = *settings;
    let shape = vec![model.height(), model.width(), 2];
    Ok(LinearOp::self_adjoint(
        "dc_solve_grad",
        shape,
        Arc::new(move |v: &[f64]| as_interleaved(&grad_map(&model, &settings, &as_complex(v)))),
    ))
}

/// Registers the DC solve on a tape.
///
/// `z` is `[H, W, 2]` or a batch `[B, H, W, 2]` (each item solved
/// independently against the same `A^H y`). The backward pass applies the
/// implicit gradient map to the upstream gradient of each item.
pub fn dc_solve_on_tape(
    tape: &Tape,
    model: &AcquisitionModel,
    z: NodeId,
    aty: &ComplexImage,
    settings: &DcSettings,
) -> Result<(NodeId, Vec<DcStats>)> {
    settings.validate()?;
    check_dims(model, aty, "dc_solve A^H y")?;
    let zt = tape.value(z);
    let (h, w) = model.dims();
    let item = h * w * 2;
    let ok = match zt.shape() {
        [zh, zw, 2] => (*zh, *zw) == (h, w),
        [_, zh, zw, 2] => (*zh, *zw) == (h, w),
        _ => false,
    };
    if !ok {
        return Err(CoreError::dimension(
            "dc_solve input tensor",
            format!("[{h}, {w}, 2] or [B, {h}, {w}, 2]"),
            format!("{:?}", zt.shape()),
        ));
    }
    let solutions: Vec<Result<DcSolution>> = zt
        .data()
        .par_chunks(item)
        .map(|zi| dc_solve_with_rhs(model, &ComplexImage::from_interleaved(h, w, zi)?, aty, settings))
        .collect();
    let mut values = Vec::with_capacity(zt.len());
    let mut stats = Vec::new();
    for s in solutions {
        let s = s?;
        values.extend(s.x.interleaved());
        stats.push(s.stats);
    }
    let value = Tensor::new(zt.shape().to_vec(), values)?;
    let model = model.clone();
    let settings = *settings;
    let node = tape.custom(
        "dc_solve",
        &[z],
        value,
        Box::new(move |g, _| {
            let grads: Vec<Vec<f64>> = g
                .par_chunks(item)
                .map(|gi| as_interleaved(&grad_map(&model, &settings, &as_complex(gi))))
                .collect();
            vec![Some(grads.concat())]
        }),
    )?;
    Ok((node, stats))
}
