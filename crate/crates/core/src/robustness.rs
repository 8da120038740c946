//! Image-quality metrics, the PGD attack and robustness sweeps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smug_autodiff::{pairwise_sum, Tape};

use crate::dataset::Dataset;
use crate::denoiser::DenoiserParams;
use crate::mri::AcquisitionModel;
use crate::training::UStabReference;
use crate::unrolling::{reconstruct_on_tape, reconstruct_perturbed, NoisePlan, ReconConfig};
use crate::{derive_seed, ComplexImage, CoreError, KSpaceData, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_dims(a: &ComplexImage, b: &ComplexImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(CoreError::dimension(
            "metric operands",
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(CoreError::InvalidConfig(format!(
            "data_range must be finite and > 0, got {data_range}"
        )));
    }
    Ok(())
}

/// PSNR in dB between the magnitudes of `a` and `b`; `+inf` when they are equal.
pub fn psnr(a: &ComplexImage, b: &ComplexImage, data_range: f64) -> Result<f64> {
    check_same_dims(a, b)?;
    check_range(data_range)?;
    let sq: Vec<f64> = a
        .magnitude()
        .iter()
        .zip(b.magnitude())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian filter keeping only fully-covered ("valid") windows.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM between magnitude images (11x11 Gaussian window, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, valid windows only).
pub fn ssim(a: &ComplexImage, b: &ComplexImage, data_range: f64) -> Result<f64> {
    check_same_dims(a, b)?;
    check_range(data_range)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::dimension(
            "ssim image size",
            format!("at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{h}x{w}"),
        ));
    }
    let (ma, mb) = (a.magnitude(), b.magnitude());
    let taps = gaussian_taps();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(&ma, h, w, &taps);
    let mu_b = filter_valid(&mb, h, w, &taps);
    let e_aa = filter_valid(&prod(&ma, &ma), h, w, &taps);
    let e_bb = filter_valid(&prod(&mb, &mb), h, w, &taps);
    let e_ab = filter_valid(&prod(&ma, &mb), h, w, &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let map: Vec<f64> = (0..mu_a.len())
        .map(|i| {
            let (ua, ub) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ua * ua;
            let vb = e_bb[i] - ub * ub;
            let cov = e_ab[i] - ua * ub;
            ((2.0 * ua * ub + c1) * (2.0 * cov + c2)) / ((ua * ua + ub * ub + c1) * (va + vb + c2))
        })
        .collect();
    Ok(pairwise_sum(&map) / map.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics of `recon` against `target`, with `data_range = max |target|`.
pub fn image_metrics(recon: &ComplexImage, target: &ComplexImage) -> Result<ImageMetrics> {
    let range = target.magnitude().into_iter().fold(0.0, f64::max);
    Ok(ImageMetrics {
        psnr: psnr(recon, target, range)?,
        ssim: ssim(recon, target, range)?,
    })
}

/// Mean and population standard deviation, summed pairwise.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, (pairwise_sum(&dev) / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n_images: usize,
}

pub fn summarize(metrics: &[ImageMetrics]) -> MetricsSummary {
    let (psnr_mean, psnr_std) = mean_std(&metrics.iter().map(|m| m.psnr).collect::<Vec<_>>());
    let (ssim_mean, ssim_std) = mean_std(&metrics.iter().map(|m| m.ssim).collect::<Vec<_>>());
    MetricsSummary {
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        n_images: metrics.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    /// Attack the deployed smoothed reconstructor (frozen noise draws).
    Smoothed,
    /// Craft the perturbation on the same network with smoothing disabled.
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// l-infinity radius applied to each real and imaginary component.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 * epsilon / steps`.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
    pub target: AttackTarget,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.004,
            steps: 10,
            step_size: None,
            restarts: 1,
            seed: 0,
            target: AttackTarget::Smoothed,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "attack epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.restarts == 0 {
            return Err(CoreError::InvalidConfig("attack restarts must be >= 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(CoreError::InvalidConfig(format!("attack step size must be >= 0, got {s}")));
            }
        }
        Ok(())
    }

    pub fn effective_step_size(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None if self.steps == 0 => 0.0,
            None => 2.5 * self.epsilon / self.steps as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub delta: ComplexImage,
    /// Objective value at `delta`.
    pub objective: f64,
}

fn project(v: &mut [f64], eps: f64) {
    v.iter_mut().for_each(|x| *x = x.clamp(-eps, eps));
}

/// Projected sign-gradient ascent of `f` over the l-infinity ball.
///
/// `f` returns the objective and its gradient at a perturbation. Every
/// iterate is scored and the best one over all restarts is returned; restart
/// 0 starts from zero, later restarts from a uniform draw in the ball.
pub fn pgd_maximize(
    f: impl Fn(&ComplexImage) -> Result<(f64, ComplexImage)>,
    height: usize,
    width: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    let zero = ComplexImage::zeros(height, width);
    if config.epsilon == 0.0 || config.steps == 0 {
        let objective = f(&zero)?.0;
        return Ok(AttackResult {
            delta: zero,
            objective,
        });
    }
    let eps = config.epsilon;
    let alpha = config.effective_step_size();
    let mut best: Option<AttackResult> = None;
    for restart in 0..config.restarts {
        let mut delta = if restart == 0 {
            vec![0.0; 2 * height * width]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[restart as u64]));
            (0..2 * height * width).map(|_| rng.random_range(-eps..=eps)).collect()
        };
        for step in 0..=config.steps {
            let current = ComplexImage::from_interleaved(height, width, &delta)?;
            let (value, grad) = f(&current)?;
            if best.as_ref().is_none_or(|b| value > b.objective) {
                best = Some(AttackResult {
                    delta: current,
                    objective: value,
                });
            }
            if step == config.steps {
                break;
            }
            for (d, g) in delta.iter_mut().zip(grad.interleaved()) {
                *d += alpha * sign(g);
            }
            project(&mut delta, eps);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `||recon(A^H y + delta) - t||^2` and its gradient with respect to `delta`.
pub fn attack_objective(
    recon: &ReconConfig,
    params: &DenoiserParams,
    model: &AcquisitionModel,
    aty: &ComplexImage,
    target: &ComplexImage,
    delta: &ComplexImage,
) -> Result<(f64, ComplexImage)> {
    let tape = Tape::new();
    let nodes = params.register(&tape, false);
    let x0 = tape.leaf(aty.add(delta).to_tensor());
    let plan = recon.noise_plan(model.height(), model.width());
    let graph = reconstruct_on_tape(&tape, recon, params, &nodes, model, aty, x0, &plan)?;
    let t = tape.constant(target.to_tensor());
    let diff = tape.sub(graph.output, t)?;
    let loss = tape.sum_squares(diff)?;
    let value = tape.value(loss).item().expect("scalar loss");
    let grads = tape.backward(loss)?;
    let g = grads
        .get(x0)
        .cloned()
        .unwrap_or_else(|| smug_autodiff::Tensor::zeros(tape.shape(x0)));
    Ok((value, ComplexImage::from_tensor(&g)?))
}

/// PGD perturbation of the image-domain input `A^H y` of a reconstructor.
///
/// The data-consistency solves keep the true measurements `y`; only the
/// starting point of the unrolling is perturbed.
pub fn pgd_attack(
    recon: &ReconConfig,
    params: &DenoiserParams,
    model: &AcquisitionModel,
    y: &KSpaceData,
    target: &ComplexImage,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let aty = model.adjoint(y)?;
    let attacked = match config.target {
        AttackTarget::Smoothed => *recon,
        AttackTarget::Base => ReconConfig {
            sigma: 0.0,
            ..*recon
        },
    };
    let (h, w) = model.dims();
    pgd_maximize(
        |d| attack_objective(&attacked, params, model, &aty, target, d),
        h,
        w,
        config,
    )
}

/// A named reconstructor under evaluation.
#[derive(Clone, Debug)]
pub struct ModelUnderTest {
    pub label: String,
    pub params: DenoiserParams,
    pub recon: ReconConfig,
}

/// How the image-domain input is disturbed before reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Clean,
    /// Gaussian noise of this std on each component of `A^H y`.
    Noise { sigma: f64, seed: u64 },
    Attack(AttackConfig),
}

/// Per-image metrics of `m` on every sample of `data`.
///
/// Reconstruction noise, input noise and attack restarts are seeded per
/// sample index, so results do not depend on evaluation order.
pub fn evaluate_model(m: &ModelUnderTest, data: &Dataset, perturbation: Perturbation) -> Result<Vec<ImageMetrics>> {
    let model = data.acquisition_model()?;
    let (h, w) = model.dims();
    data.samples
        .par_iter()
        .map(|s| {
            let recon = m.recon.reseeded(&[s.meta.index]);
            let delta = match perturbation {
                Perturbation::Clean => None,
                Perturbation::Noise { sigma, seed } => {
                    let plan = NoisePlan::new(derive_seed(seed, &[s.meta.index]), sigma, h, w);
                    Some(ComplexImage::from_interleaved(h, w, &plan.draw(0, 0))?)
                }
                Perturbation::Attack(cfg) if cfg.epsilon == 0.0 || cfg.steps == 0 => None,
                Perturbation::Attack(cfg) => {
                    let cfg = AttackConfig {
                        seed: derive_seed(cfg.seed, &[s.meta.index]),
                        ..cfg
                    };
                    Some(pgd_attack(&recon, &m.params, &model, &s.kspace, &s.target, &cfg)?.delta)
                }
            };
            let (out, _) = reconstruct_perturbed(&recon, &m.params, &model, &s.kspace, delta.as_ref())?;
            image_metrics(&out, &s.target)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    SamplingRate,
    UnrollSteps,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::SamplingRate => "sampling_rate",
            SweepAxis::UnrollSteps => "unroll_steps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl SweepSpec {
    /// Values must be ascending and include the setting the models were trained at.
    pub fn validate(&self, training_value: f64) -> Result<()> {
        if self.values.is_empty() {
            return Err(CoreError::InvalidConfig("sweep has no values".into()));
        }
        if self.values.windows(2).any(|p| p[0] >= p[1]) {
            return Err(CoreError::InvalidConfig(format!(
                "{} sweep values must be strictly ascending: {:?}",
                self.axis.name(),
                self.values
            )));
        }
        if !self.values.iter().any(|&v| (v - training_value).abs() < 1e-9) {
            return Err(CoreError::InvalidConfig(format!(
                "{} sweep values {:?} do not include the training setting {training_value}",
                self.axis.name(),
                self.values
            )));
        }
        Ok(())
    }
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub axis: String,
    pub value: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n_images: usize,
}

impl SweepRow {
    pub fn new(model: &str, axis: &str, value: f64, metrics: &[ImageMetrics]) -> Self {
        let s = summarize(metrics);
        Self {
            model: model.to_string(),
            axis: axis.to_string(),
            value,
            psnr_mean: s.psnr_mean,
            psnr_std: s.psnr_std,
            ssim_mean: s.ssim_mean,
            ssim_std: s.ssim_std,
            n_images: s.n_images,
        }
    }
}

/// Acceleration whose sampling rate is `rate` (e.g. 0.25 -> 4).
pub fn acceleration_for_rate(rate: f64) -> Result<usize> {
    let r = (1.0 / rate).round();
    if !(rate > 0.0 && rate <= 1.0) || ((1.0 / r) - rate).abs() > 1e-6 {
        return Err(CoreError::InvalidConfig(format!(
            "sampling rate {rate} is not 1/R for an integer acceleration R"
        )));
    }
    Ok(r as usize)
}

/// Metrics of every model at every value of one perturbation axis.
///
/// * `epsilon`: PGD with radius `value` (0 is the clean reconstruction).
/// * `sampling_rate`: the test targets re-measured with a mask of that rate.
/// * `unroll_steps`: `N = value` at evaluation time.
pub fn run_sweep(
    spec: &SweepSpec,
    models: &[ModelUnderTest],
    test: &Dataset,
    attack: &AttackConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for m in models {
        for &value in &spec.values {
            let metrics = match spec.axis {
                SweepAxis::Epsilon => {
                    let cfg = AttackConfig {
                        epsilon: value,
                        ..*attack
                    };
                    evaluate_model(m, test, Perturbation::Attack(cfg))?
                }
                SweepAxis::SamplingRate => {
                    let data = test.remeasure(acceleration_for_rate(value)?)?;
                    evaluate_model(m, &data, Perturbation::Clean)?
                }
                SweepAxis::UnrollSteps => {
                    if value < 0.0 || value.fract() != 0.0 {
                        return Err(CoreError::InvalidConfig(format!(
                            "unroll steps must be a non-negative integer, got {value}"
                        )));
                    }
                    let mm = ModelUnderTest {
                        recon: ReconConfig {
                            steps: value as usize,
                            ..m.recon
                        },
                        ..m.clone()
                    };
                    evaluate_model(&mm, test, Perturbation::Clean)?
                }
            };
            rows.push(SweepRow::new(&m.label, spec.axis.name(), value, &metrics));
        }
    }
    Ok(rows)
}

/// Clean, noisy-input and attacked accuracy of every model.
///
/// Rows use the axes `clean` (value 0), `noise` (value = input noise std)
/// and `robust` (value = attack radius).
pub fn condition_table(
    models: &[ModelUnderTest],
    test: &Dataset,
    noise_sigma: f64,
    noise_seed: u64,
    attack: &AttackConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for m in models {
        let clean = evaluate_model(m, test, Perturbation::Clean)?;
        rows.push(SweepRow::new(&m.label, "clean", 0.0, &clean));
        let noise = evaluate_model(
            m,
            test,
            Perturbation::Noise {
                sigma: noise_sigma,
                seed: noise_seed,
            },
        )?;
        rows.push(SweepRow::new(&m.label, "noise", noise_sigma, &noise));
        let robust = evaluate_model(m, test, Perturbation::Attack(*attack))?;
        rows.push(SweepRow::new(&m.label, "robust", attack.epsilon, &robust));
    }
    Ok(rows)
}

/// Epsilon sweep over models fine-tuned with each UStab reference.
pub fn run_reference_ablation(
    variants: &[(UStabReference, ModelUnderTest)],
    test: &Dataset,
    epsilons: &[f64],
    attack: &AttackConfig,
) -> Result<Vec<SweepRow>> {
    let mut seen: Vec<UStabReference> = variants.iter().map(|v| v.0).collect();
    seen.sort_by_key(|r| r.name());
    seen.dedup();
    if seen.len() != UStabReference::ALL.len() || variants.len() != UStabReference::ALL.len() {
        return Err(CoreError::InvalidConfig(format!(
            "reference ablation needs one model per UStab reference ({} variants), got {}",
            UStabReference::ALL.len(),
            variants.len()
        )));
    }
    let models: Vec<ModelUnderTest> = variants
        .iter()
        .map(|(r, m)| ModelUnderTest {
            label: r.name().to_string(),
            ..m.clone()
        })
        .collect();
    let spec = SweepSpec {
        axis: SweepAxis::Epsilon,
        values: epsilons.to_vec(),
    };
    run_sweep(&spec, &models, test, attack)
}

pub fn write_rows_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> CoreError {
    CoreError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Plot-ready curve: `(x, mean, std)` triples of one metric along one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub model: String,
    pub axis: String,
    pub metric: String,
    pub points: Vec<[Option<f64>; 3]>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Groups rows into one PSNR and one SSIM curve per (model, axis).
///
/// Non-finite values (identical images give infinite PSNR) become `null`.
pub fn curves(rows: &[SweepRow]) -> Vec<Curve> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.model.clone(), r.axis.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = Vec::new();
    for (model, axis) in keys {
        let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.model == model && r.axis == axis).collect();
        for metric in ["psnr", "ssim"] {
            let points = sel
                .iter()
                .map(|r| {
                    let (m, s) = if metric == "psnr" {
                        (r.psnr_mean, r.psnr_std)
                    } else {
                        (r.ssim_mean, r.ssim_std)
                    };
                    [finite(r.value), finite(m), finite(s)]
                })
                .collect();
            out.push(Curve {
                model: model.clone(),
                axis: axis.clone(),
                metric: metric.to_string(),
                points,
            });
        }
    }
    out
}
