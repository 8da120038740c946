//! Unrolled reconstruction: vanilla MoDL and its randomized-smoothing variants.
//!
//! Every architecture alternates a denoiser `D` with the data-consistency solve
//! `DC(z) = (A^H A + lambda I)^{-1} (A^H y + lambda z)`, starting from
//! `x_0 = A^H y`:
//!
//! * `vanilla`: `x_{n+1} = DC(D(x_n))`.
//! * `rs-e2e`: the mean of the whole vanilla pipeline over `m` noisy copies
//!   of its input `x_0 + nu_j`.
//! * `smugv0`: `x_{n+1} = mean_j DC(D(x_n + nu_j))`, i.e. smoothing around a
//!   full step (`N * m` solves).
//! * `smug`: `z_n = mean_j D(x_n + nu_j)`, then `x_{n+1} = DC(z_n)`
//!   (`N` solves).
//!
//! With `sigma = 0` the smoothed modes evaluate a single noiseless copy and are
//! bit-identical to `vanilla`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use smug_autodiff::{pairwise_sum_rows, NodeId, Tape, Tensor};

use crate::denoiser::{denoise_on_tape, DenoiserParams, ParamNodes};
use crate::mri::{dc_solve_on_tape, AcquisitionModel, DcSettings, DcStats};
use crate::{derive_seed, ComplexImage, CoreError, KSpaceData, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "rs-e2e")]
    RsE2e,
    #[serde(rename = "smugv0")]
    SmugV0,
    #[serde(rename = "smug")]
    Smug,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vanilla, Mode::RsE2e, Mode::SmugV0, Mode::Smug];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::RsE2e => "rs-e2e",
            Mode::SmugV0 => "smugv0",
            Mode::Smug => "smug",
        }
    }

    pub fn is_smoothed(self) -> bool {
        self != Mode::Vanilla
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                CoreError::InvalidConfig(format!(
                    "unknown mode {s:?}; expected one of vanilla, rs-e2e, smugv0, smug"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub mode: Mode,
    /// Number of unrolling steps `N`.
    pub steps: usize,
    pub lambda: f64,
    /// Std of the smoothing noise on each real and imaginary component.
    pub sigma: f64,
    /// Monte Carlo samples `m` per smoothed expectation.
    pub samples: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Smug,
            steps: 8,
            lambda: 1.0,
            sigma: 0.01,
            samples: 10,
            cg_tol: 1e-6,
            cg_max_iter: 100,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        self.dc_settings().validate()?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.samples == 0 {
            return Err(CoreError::InvalidConfig("samples (m) must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dc_settings(&self) -> DcSettings {
        DcSettings {
            lambda: self.lambda,
            tol: self.cg_tol,
            max_iter: self.cg_max_iter,
        }
    }

    /// Whether noisy copies are actually drawn.
    pub fn smoothing_active(&self) -> bool {
        self.mode.is_smoothed() && self.sigma > 0.0
    }

    /// Copies evaluated per smoothed expectation: `m`, or 1 when smoothing is off.
    pub fn effective_samples(&self) -> usize {
        if self.smoothing_active() {
            self.samples
        } else {
            1
        }
    }

    pub fn noise_plan(&self, height: usize, width: usize) -> NoisePlan {
        NoisePlan::new(self.seed, self.sigma, height, width)
    }

    /// Same settings with the noise seed specialised to one item (sample, epoch, ...).
    pub fn reseeded(&self, indices: &[u64]) -> ReconConfig {
        ReconConfig {
            seed: derive_seed(self.seed, indices),
            ..*self
        }
    }
}

/// Deterministic Gaussian perturbations indexed by `(step, sample)`.
///
/// Each draw is an `[H, W, 2]` tensor with i.i.d. `N(0, sigma^2)` entries,
/// generated from its own seed so any draw can be reproduced in isolation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePlan {
    seed: u64,
    sigma: f64,
    height: usize,
    width: usize,
}

impl NoisePlan {
    pub fn new(seed: u64, sigma: f64, height: usize, width: usize) -> Self {
        Self {
            seed,
            sigma,
            height,
            width,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Independent plan for another purpose (e.g. fresh draws for a loss term).
    pub fn fork(&self, stream: u64) -> NoisePlan {
        NoisePlan {
            seed: derive_seed(self.seed, &[u64::MAX, stream]),
            ..self.clone()
        }
    }

    /// Interleaved draw `nu_{step, j}`.
    pub fn draw(&self, step: usize, j: usize) -> Vec<f64> {
        let n = 2 * self.height * self.width;
        if self.sigma == 0.0 {
            return vec![0.0; n];
        }
        let normal = Normal::new(0.0, self.sigma).expect("finite sigma");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[step as u64, j as u64]));
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    }

    /// Draws `j = 0..m` for one step stacked as `[m, H, W, 2]`.
    pub fn draws(&self, step: usize, m: usize) -> Tensor {
        let data = (0..m).flat_map(|j| self.draw(step, j)).collect();
        Tensor::new([m, self.height, self.width, 2], data).expect("consistent shape")
    }
}

/// Monte Carlo estimate of `E[f(x + nu)]` with the draws of `step` in `plan`.
///
/// Copies are averaged with a fixed pairwise summation order. With
/// `sigma = 0` this is exactly `f(x)`.
pub fn rs_expectation(
    f: impl Fn(&ComplexImage) -> Result<ComplexImage>,
    x: &ComplexImage,
    samples: usize,
    plan: &NoisePlan,
    step: usize,
) -> Result<ComplexImage> {
    if samples == 0 {
        return Err(CoreError::InvalidConfig("samples (m) must be >= 1".into()));
    }
    if plan.sigma() == 0.0 {
        return f(x);
    }
    let (h, w) = x.dims();
    let base = x.interleaved();
    let outputs = (0..samples)
        .map(|j| {
            let noisy: Vec<f64> = base.iter().zip(plan.draw(step, j)).map(|(a, b)| a + b).collect();
            Ok(f(&ComplexImage::from_interleaved(h, w, &noisy)?)?.interleaved())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = outputs.iter().map(Vec::as_slice).collect();
    let inv = 1.0 / samples as f64;
    let mean: Vec<f64> = pairwise_sum_rows(&rows).into_iter().map(|v| v * inv).collect();
    ComplexImage::from_interleaved(h, w, &mean)
}

/// Tape handles of one unrolling step.
#[derive(Clone, Debug)]
pub struct StepNodes {
    /// `x_n`; `[m, H, W, 2]` for `rs-e2e` (one row per pipeline copy), else `[H, W, 2]`.
    pub input: NodeId,
    /// `D(x_n + nu_{n,j})` stacked over `j`, for `smug` and `smugv0` with smoothing on.
    pub noisy_denoised: Option<NodeId>,
    /// Denoiser output fed to data consistency (mean over copies where smoothed).
    pub z: NodeId,
    pub dc: Vec<DcStats>,
}

/// A reconstruction recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeRecon {
    pub output: NodeId,
    pub steps: Vec<StepNodes>,
}

impl TapeRecon {
    pub fn cg_solves(&self) -> usize {
        self.steps.iter().map(|s| s.dc.len()).sum()
    }
}

/// `m` noisy copies `x + nu_{step, j}` as a `[m, H, W, 2]` node.
fn noisy_copies(tape: &Tape, x: NodeId, step: usize, plan: &NoisePlan, m: usize) -> Result<NodeId> {
    let copies = tape.tile(x, m)?;
    let noise = tape.constant(plan.draws(step, m));
    Ok(tape.add(copies, noise)?)
}

/// Records the reconstruction of `x0` (normally `A^H y`) on `tape`.
///
/// `aty` is the right-hand side `A^H y` used by every data-consistency solve;
/// gradients with respect to `x0` and the parameter nodes are available
/// through the returned graph.
pub fn reconstruct_on_tape(
    tape: &Tape,
    config: &ReconConfig,
    params: &DenoiserParams,
    nodes: &ParamNodes,
    model: &AcquisitionModel,
    aty: &ComplexImage,
    x0: NodeId,
    plan: &NoisePlan,
) -> Result<TapeRecon> {
    config.validate()?;
    let (h, w) = model.dims();
    if tape.shape(x0) != [h, w, 2] {
        return Err(CoreError::dimension(
            "reconstruction input",
            format!("[{h}, {w}, 2]"),
            format!("{:?}", tape.shape(x0)),
        ));
    }
    let dcfg = params.config();
    let settings = config.dc_settings();
    let m = config.effective_samples();
    let mut steps = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok(TapeRecon { output: x0, steps });
    }

    let output = if !config.smoothing_active() || config.mode == Mode::Vanilla {
        let mut x = x0;
        for _ in 0..config.steps {
            let z = denoise_on_tape(tape, dcfg, nodes, x)?;
            let (next, dc) = dc_solve_on_tape(tape, model, z, aty, &settings)?;
            steps.push(StepNodes {
                input: x,
                noisy_denoised: None,
                z,
                dc,
            });
            x = next;
        }
        x
    } else {
        match config.mode {
            Mode::Smug => {
                let mut x = x0;
                for n in 0..config.steps {
                    let noisy = noisy_copies(tape, x, n, plan, m)?;
                    let zb = denoise_on_tape(tape, dcfg, nodes, noisy)?;
                    let z = tape.mean_batch(zb)?;
                    let (next, dc) = dc_solve_on_tape(tape, model, z, aty, &settings)?;
                    steps.push(StepNodes {
                        input: x,
                        noisy_denoised: Some(zb),
                        z,
                        dc,
                    });
                    x = next;
                }
                x
            }
            Mode::SmugV0 => {
                let mut x = x0;
                for n in 0..config.steps {
                    let noisy = noisy_copies(tape, x, n, plan, m)?;
                    let zb = denoise_on_tape(tape, dcfg, nodes, noisy)?;
                    let (xb, dc) = dc_solve_on_tape(tape, model, zb, aty, &settings)?;
                    let z = tape.mean_batch(zb)?;
                    steps.push(StepNodes {
                        input: x,
                        noisy_denoised: Some(zb),
                        z,
                        dc,
                    });
                    x = tape.mean_batch(xb)?;
                }
                x
            }
            Mode::RsE2e => {
                let mut xb = noisy_copies(tape, x0, 0, plan, m)?;
                for _ in 0..config.steps {
                    let zb = denoise_on_tape(tape, dcfg, nodes, xb)?;
                    let (next, dc) = dc_solve_on_tape(tape, model, zb, aty, &settings)?;
                    steps.push(StepNodes {
                        input: xb,
                        noisy_denoised: None,
                        z: zb,
                        dc,
                    });
                    xb = next;
                }
                tape.mean_batch(xb)?
            }
            Mode::Vanilla => unreachable!("handled above"),
        }
    };
    Ok(TapeRecon { output, steps })
}

/// Per-step record of a reconstruction.
///
/// `x[n]` is the input of step `n` (so `x[0] = A^H y`) and `z[n]` the
/// denoiser output passed to data consistency. For `rs-e2e`, entries after
/// the first are means over the pipeline copies.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconTrace {
    pub mode: Mode,
    pub x: Vec<ComplexImage>,
    pub z: Vec<ComplexImage>,
    pub dc: Vec<Vec<DcStats>>,
    pub output: ComplexImage,
    pub params_digest: String,
    pub noise_seed: u64,
    pub sigma: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub cg_solves: usize,
    pub residual_norms: Vec<f64>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mode: Mode,
    pub steps: Vec<StepSummary>,
    pub cg_solves: usize,
    pub all_converged: bool,
    pub params_digest: String,
    pub noise_seed: u64,
}

impl ReconTrace {
    pub fn steps(&self) -> usize {
        self.x.len()
    }

    pub fn cg_solves(&self) -> usize {
        self.dc.iter().map(Vec::len).sum()
    }

    pub fn all_converged(&self) -> bool {
        self.dc.iter().flatten().all(|s| s.converged)
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            mode: self.mode,
            steps: self
                .dc
                .iter()
                .enumerate()
                .map(|(step, dc)| StepSummary {
                    step,
                    cg_solves: dc.len(),
                    residual_norms: dc.iter().map(|s| s.residual_norm).collect(),
                    iterations: dc.iter().map(|s| s.iterations).collect(),
                    converged: dc.iter().map(|s| s.converged).collect(),
                })
                .collect(),
            cg_solves: self.cg_solves(),
            all_converged: self.all_converged(),
            params_digest: self.params_digest.clone(),
            noise_seed: self.noise_seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

/// Image of a `[H, W, 2]` node, or the pairwise mean of a `[B, H, W, 2]` node.
fn node_image(tape: &Tape, id: NodeId) -> Result<ComplexImage> {
    let t = tape.value(id);
    match *t.shape() {
        [h, w, 2] => ComplexImage::from_interleaved(h, w, t.data()),
        [b, h, w, 2] => {
            let rows: Vec<&[f64]> = t.data().chunks(2 * h * w).collect();
            let inv = 1.0 / b as f64;
            let mean: Vec<f64> = pairwise_sum_rows(&rows).into_iter().map(|v| v * inv).collect();
            ComplexImage::from_interleaved(h, w, &mean)
        }
        _ => Err(CoreError::dimension("trace image", "[H, W, 2]", format!("{:?}", t.shape()))),
    }
}

impl TapeRecon {
    pub fn trace(
        &self,
        tape: &Tape,
        config: &ReconConfig,
        params: &DenoiserParams,
        x0: NodeId,
    ) -> Result<ReconTrace> {
        let mut x = Vec::with_capacity(self.steps.len());
        let mut z = Vec::with_capacity(self.steps.len());
        for (n, s) in self.steps.iter().enumerate() {
            x.push(node_image(tape, if n == 0 { x0 } else { s.input })?);
            z.push(node_image(tape, s.z)?);
        }
        Ok(ReconTrace {
            mode: config.mode,
            x,
            z,
            dc: self.steps.iter().map(|s| s.dc.clone()).collect(),
            output: node_image(tape, self.output)?,
            params_digest: params.digest(),
            noise_seed: config.seed,
            sigma: config.sigma,
            samples: config.effective_samples(),
        })
    }
}

/// Reconstructs from measurements `y`, starting at `A^H y + perturbation`.
pub fn reconstruct_perturbed(
    config: &ReconConfig,
    params: &DenoiserParams,
    model: &AcquisitionModel,
    y: &KSpaceData,
    perturbation: Option<&ComplexImage>,
) -> Result<(ComplexImage, ReconTrace)> {
    let aty = model.adjoint(y)?;
    let start = match perturbation {
        Some(d) => {
            if d.dims() != aty.dims() {
                return Err(CoreError::dimension(
                    "perturbation",
                    format!("{:?}", aty.dims()),
                    format!("{:?}", d.dims()),
                ));
            }
            aty.add(d)
        }
        None => aty.clone(),
    };
    let tape = Tape::new();
    let nodes = params.register(&tape, false);
    let x0 = tape.constant(start.to_tensor());
    let plan = config.noise_plan(model.height(), model.width());
    let recon = reconstruct_on_tape(&tape, config, params, &nodes, model, &aty, x0, &plan)?;
    let trace = recon.trace(&tape, config, params, x0)?;
    Ok((trace.output.clone(), trace))
}

pub fn reconstruct(
    config: &ReconConfig,
    params: &DenoiserParams,
    model: &AcquisitionModel,
    y: &KSpaceData,
) -> Result<(ComplexImage, ReconTrace)> {
    reconstruct_perturbed(config, params, model, y, None)
}
