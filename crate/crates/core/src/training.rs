//! Losses, Adam, the learning-rate schedule and the training loops.
//!
//! Three objectives share one loop:
//!
//! * pre-training of the denoiser alone, `E_nu ||D(t + nu) - t||^2`;
//! * supervised training of a reconstructor, `||x_N - t||^2` (used for the
//!   vanilla baseline);
//! * UStab fine-tuning of a smoothed reconstructor,
//!   `lambda_l ||x_N - t||^2 + sum_n E_nu ||D(x_n + nu) - ref_n||^2`.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smug_autodiff::{pairwise_sum, pairwise_sum_rows, NodeId, Tape};

use crate::container::{read_container, write_container};
use crate::dataset::Dataset;
use crate::denoiser::{denoise_on_tape, DenoiserConfig, DenoiserParams, ParamNodes};
use crate::mri::AcquisitionModel;
use crate::robustness::{evaluate_model, summarize, ModelUnderTest, Perturbation};
use crate::unrolling::{reconstruct_on_tape, Mode, NoisePlan, ReconConfig, ReconTrace, TapeRecon};
use crate::{derive_seed, ComplexImage, CoreError, KSpaceData, Result};

const STATE_KIND: &str = "train-state";
const SHUFFLE_STREAM: u64 = 11;
const NOISE_STREAM: u64 = 12;
const FRESH_USTAB_STREAM: u64 = 13;

/// Target image of the UStab penalty at step `n`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UStabReference {
    /// `D(t)` with the current (trained) denoiser.
    #[default]
    DTarget,
    /// The target `t` itself.
    Target,
    /// `D(x_n)` with the current denoiser.
    DInput,
    /// `D_frozen(t)` with a fixed snapshot.
    FrozenDTarget,
    /// `D_frozen(x_n)` with a fixed snapshot.
    FrozenDInput,
}

impl UStabReference {
    pub const ALL: [UStabReference; 5] = [
        UStabReference::DTarget,
        UStabReference::Target,
        UStabReference::DInput,
        UStabReference::FrozenDTarget,
        UStabReference::FrozenDInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UStabReference::DTarget => "d_target",
            UStabReference::Target => "target",
            UStabReference::DInput => "d_input",
            UStabReference::FrozenDTarget => "frozen_d_target",
            UStabReference::FrozenDInput => "frozen_d_input",
        }
    }

    pub fn is_frozen(self) -> bool {
        matches!(self, UStabReference::FrozenDTarget | UStabReference::FrozenDInput)
    }
}

impl std::str::FromStr for UStabReference {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        UStabReference::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown UStab reference {s:?}")))
    }
}

/// Loss value and its gradient with respect to the flattened parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn scalar(tape: &Tape, id: NodeId) -> f64 {
    tape.value(id).item().expect("scalar loss")
}

fn finish(tape: &Tape, nodes: &ParamNodes, loss: NodeId) -> Result<LossOutput> {
    let grads = tape.backward(loss)?;
    Ok(LossOutput {
        value: scalar(tape, loss),
        grad: nodes.gradient(&grads),
    })
}

/// `(1/k) sum_j ||batch_j - reference||^2` for a `[k, H, W, 2]` batch.
fn mean_sq_distance(tape: &Tape, batch: NodeId, reference: NodeId) -> Result<NodeId> {
    let k = tape.shape(batch)[0];
    let refs = tape.tile(reference, k)?;
    let diff = tape.sub(batch, refs)?;
    let sq = tape.sum_squares(diff)?;
    Ok(tape.scale(sq, 1.0 / k as f64)?)
}

/// Monte Carlo pre-training loss `(1/m) sum_j ||D(t + nu_j) - t||^2`.
///
/// Draws come from step 0 of `plan`; with `sigma = 0` a single noiseless copy
/// is evaluated.
pub fn pretrain_loss(
    params: &DenoiserParams,
    t: &ComplexImage,
    samples: usize,
    plan: &NoisePlan,
) -> Result<LossOutput> {
    if samples == 0 {
        return Err(CoreError::InvalidConfig("samples (m) must be >= 1".into()));
    }
    let k = if plan.sigma() > 0.0 { samples } else { 1 };
    let tape = Tape::new();
    let nodes = params.register(&tape, true);
    let tn = tape.constant(t.to_tensor());
    let copies = tape.tile(tn, k)?;
    let noise = tape.constant(plan.draws(0, k));
    let noisy = tape.add(copies, noise)?;
    let out = denoise_on_tape(&tape, params.config(), &nodes, noisy)?;
    let loss = mean_sq_distance(&tape, out, tn)?;
    finish(&tape, &nodes, loss)
}

/// What a UStab term compares against and which noise it uses.
#[derive(Clone, Copy, Debug)]
pub struct UStabTerms<'a> {
    pub reference: UStabReference,
    /// Snapshot used by the frozen reference variants.
    pub frozen: Option<&'a DenoiserParams>,
    /// Draw fresh noise instead of reusing the reconstruction's draws.
    pub fresh_noise: bool,
}

impl UStabTerms<'_> {
    fn frozen_params(&self) -> Result<Option<&DenoiserParams>> {
        match (self.reference.is_frozen(), self.frozen) {
            (true, None) => Err(CoreError::InvalidConfig(format!(
                "UStab reference {} needs a frozen denoiser snapshot",
                self.reference.name()
            ))),
            (true, Some(p)) => Ok(Some(p)),
            (false, _) => Ok(None),
        }
    }
}

/// UStab penalty over the steps of a recorded reconstruction.
///
/// Step `n` contributes `(1/k) sum_j ||D(x_n + nu_{n,j}) - ref_n||^2`. When the
/// reconstruction already evaluated `D(x_n + nu_{n,j})` (smoothed `smug` and
/// `smugv0`), those nodes are reused unless fresh noise is requested.
#[allow(clippy::too_many_arguments)]
pub fn ustab_on_tape(
    tape: &Tape,
    params: &DenoiserParams,
    nodes: &ParamNodes,
    recon: &TapeRecon,
    target: NodeId,
    plan: &NoisePlan,
    samples: usize,
    terms: &UStabTerms,
) -> Result<NodeId> {
    let dcfg = params.config();
    let frozen = terms
        .frozen_params()?
        .map(|p| (p, p.register(tape, false)));
    let fresh_plan = plan.fork(FRESH_USTAB_STREAM);
    let k = if plan.sigma() > 0.0 { samples } else { 1 };
    let d_target = match terms.reference {
        UStabReference::DTarget => Some(denoise_on_tape(tape, dcfg, nodes, target)?),
        UStabReference::FrozenDTarget => {
            let (fp, fnodes) = frozen.as_ref().expect("checked above");
            Some(denoise_on_tape(tape, fp.config(), fnodes, target)?)
        }
        _ => None,
    };
    let mut total: Option<NodeId> = None;
    for (n, step) in recon.steps.iter().enumerate() {
        if tape.shape(step.input).len() != 3 {
            return Err(CoreError::InvalidConfig(
                "UStab needs a single image per step; rs-e2e reconstructions are not supported".into(),
            ));
        }
        let x = step.input;
        let noisy_out = match step.noisy_denoised {
            Some(id) if !terms.fresh_noise => id,
            _ => {
                let draw_plan = if terms.fresh_noise { &fresh_plan } else { plan };
                let copies = tape.tile(x, k)?;
                let noise = tape.constant(draw_plan.draws(n, k));
                let noisy = tape.add(copies, noise)?;
                denoise_on_tape(tape, dcfg, nodes, noisy)?
            }
        };
        let reference = match terms.reference {
            UStabReference::DTarget | UStabReference::FrozenDTarget => d_target.expect("computed above"),
            UStabReference::Target => target,
            UStabReference::DInput => denoise_on_tape(tape, dcfg, nodes, x)?,
            UStabReference::FrozenDInput => {
                let (fp, fnodes) = frozen.as_ref().expect("checked above");
                denoise_on_tape(tape, fp.config(), fnodes, x)?
            }
        };
        let term = mean_sq_distance(tape, noisy_out, reference)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(smug_autodiff::Tensor::scalar(0.0)),
    })
}

/// UStab value evaluated directly from a reconstruction trace.
///
/// The trace must come from `params` and the noise seed of `plan`; draws
/// `nu_{n,j}` are regenerated from the plan.
pub fn ustab_loss(
    params: &DenoiserParams,
    trace: &ReconTrace,
    t: &ComplexImage,
    samples: usize,
    plan: &NoisePlan,
    terms: &UStabTerms,
) -> Result<f64> {
    if trace.params_digest != params.digest() || trace.noise_seed != plan.seed() {
        return Err(CoreError::TraceMismatch);
    }
    let frozen = terms.frozen_params()?;
    let draw_plan = if terms.fresh_noise {
        plan.fork(FRESH_USTAB_STREAM)
    } else {
        plan.clone()
    };
    let k = if plan.sigma() > 0.0 { samples } else { 1 };
    let (h, w) = t.dims();
    let d_target = match terms.reference {
        UStabReference::DTarget => Some(params.denoise(t)?),
        UStabReference::FrozenDTarget => Some(frozen.expect("checked").denoise(t)?),
        _ => None,
    };
    let mut total = Vec::with_capacity(trace.x.len());
    for (n, x) in trace.x.iter().enumerate() {
        let reference = match terms.reference {
            UStabReference::DTarget | UStabReference::FrozenDTarget => d_target.clone().expect("computed"),
            UStabReference::Target => t.clone(),
            UStabReference::DInput => params.denoise(x)?,
            UStabReference::FrozenDInput => frozen.expect("checked").denoise(x)?,
        };
        let mut per_copy = Vec::with_capacity(k);
        for j in 0..k {
            let noise = ComplexImage::from_interleaved(h, w, &draw_plan.draw(n, j))?;
            per_copy.push(params.denoise(&x.add(&noise))?.sub(&reference).norm_sqr());
        }
        total.push(pairwise_sum(&per_copy) / k as f64);
    }
    Ok(total.iter().sum())
}

/// Settings of the fine-tuning objective beyond the reconstruction itself.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneTerms<'a> {
    pub lambda_ell: f64,
    pub ustab: UStabTerms<'a>,
}

fn check_finetune_mode(mode: Mode) -> Result<()> {
    match mode {
        Mode::Smug | Mode::SmugV0 => Ok(()),
        other => Err(CoreError::InvalidConfig(format!(
            "fine-tuning requires a smoothed unrolled mode (smug or smugv0), got {other}"
        ))),
    }
}

/// `lambda_l ||x_N - t||^2 + UStab`, differentiated through the whole unrolling.
pub fn finetune_loss(
    params: &DenoiserParams,
    model: &AcquisitionModel,
    y: &KSpaceData,
    t: &ComplexImage,
    recon: &ReconConfig,
    terms: &FinetuneTerms,
) -> Result<LossOutput> {
    check_finetune_mode(recon.mode)?;
    if !(terms.lambda_ell >= 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "lambda_ell must be >= 0, got {}",
            terms.lambda_ell
        )));
    }
    let aty = model.adjoint(y)?;
    let tape = Tape::new();
    let nodes = params.register(&tape, true);
    let x0 = tape.constant(aty.to_tensor());
    let plan = recon.noise_plan(model.height(), model.width());
    let graph = reconstruct_on_tape(&tape, recon, params, &nodes, model, &aty, x0, &plan)?;
    let tn = tape.constant(t.to_tensor());
    let diff = tape.sub(graph.output, tn)?;
    let sq = tape.sum_squares(diff)?;
    let rec = tape.scale(sq, terms.lambda_ell)?;
    let ustab = ustab_on_tape(&tape, params, &nodes, &graph, tn, &plan, recon.samples, &terms.ustab)?;
    let loss = tape.add(rec, ustab)?;
    finish(&tape, &nodes, loss)
}

/// Plain reconstruction error `||x_N - t||^2`.
pub fn supervised_loss(
    params: &DenoiserParams,
    model: &AcquisitionModel,
    y: &KSpaceData,
    t: &ComplexImage,
    recon: &ReconConfig,
) -> Result<LossOutput> {
    let aty = model.adjoint(y)?;
    let tape = Tape::new();
    let nodes = params.register(&tape, true);
    let x0 = tape.constant(aty.to_tensor());
    let plan = recon.noise_plan(model.height(), model.width());
    let graph = reconstruct_on_tape(&tape, recon, params, &nodes, model, &aty, x0, &plan)?;
    let tn = tape.constant(t.to_tensor());
    let diff = tape.sub(graph.output, tn)?;
    let loss = tape.sum_squares(diff)?;
    finish(&tape, &nodes, loss)
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    betas: (f64, f64),
    eps_hat: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(CoreError::dimension(
            "adam parameter/gradient/moment lengths",
            params.len(),
            format!("{} / {} / {}", grads.len(), state.m.len(), state.v.len()),
        ));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps_hat);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    /// First epoch of the linear decay to zero.
    pub decay_start: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub batch_size: usize,
    pub lambda_ell: f64,
    /// Noise std for pre-training and for the smoothing inside fine-tuning.
    pub sigma: f64,
    /// Monte Carlo samples for pre-training and fine-tuning.
    pub samples: usize,
    pub reference: UStabReference,
    pub fresh_ustab_noise: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr_initial: 1e-3,
            decay_start: 4,
            beta1: 0.5,
            beta2: 0.999,
            eps_hat: 1e-8,
            batch_size: 2,
            lambda_ell: 10.0,
            sigma: 0.01,
            samples: 10,
            reference: UStabReference::DTarget,
            fresh_ustab_noise: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if !(self.lr_initial > 0.0) {
            return bad(format!("lr_initial must be > 0, got {}", self.lr_initial));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.lambda_ell >= 0.0) {
            return bad(format!("lambda_ell must be >= 0, got {}", self.lambda_ell));
        }
        if self.batch_size == 0 || self.samples == 0 {
            return bad("batch_size and samples must be >= 1".into());
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr_initial,
            decay_start: self.decay_start,
            epochs: self.epochs,
        }
    }
}

/// Constant learning rate, then a linear ramp reaching zero at the final epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_start: usize,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let last = self.epochs.saturating_sub(1);
        if epoch >= last {
            0.0
        } else if epoch < self.decay_start {
            self.initial
        } else {
            self.initial * (last - epoch) as f64 / (last - self.decay_start) as f64
        }
    }
}

/// What a training run optimizes.
#[derive(Clone, Debug)]
pub enum Objective {
    Pretrain,
    Supervised { recon: ReconConfig },
    Finetune {
        recon: ReconConfig,
        frozen: Option<DenoiserParams>,
    },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Pretrain => "pretrain",
            Objective::Supervised { .. } => "supervised",
            Objective::Finetune { .. } => "finetune",
        }
    }

    fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        match self {
            Objective::Pretrain => Ok(()),
            Objective::Supervised { recon } => recon.validate(),
            Objective::Finetune { recon, frozen } => {
                recon.validate()?;
                check_finetune_mode(recon.mode)?;
                if cfg.reference.is_frozen() && frozen.is_none() {
                    return Err(CoreError::InvalidConfig(format!(
                        "UStab reference {} needs a frozen denoiser snapshot",
                        cfg.reference.name()
                    )));
                }
                Ok(())
            }
        }
    }

    fn sample_loss(
        &self,
        cfg: &TrainConfig,
        params: &DenoiserParams,
        model: &AcquisitionModel,
        sample: &crate::dataset::Sample,
        epoch: usize,
    ) -> Result<LossOutput> {
        let keys = [NOISE_STREAM, epoch as u64, sample.meta.index];
        match self {
            Objective::Pretrain => {
                let (h, w) = sample.target.dims();
                let plan = NoisePlan::new(derive_seed(cfg.seed, &keys), cfg.sigma, h, w);
                pretrain_loss(params, &sample.target, cfg.samples, &plan)
            }
            Objective::Supervised { recon } => {
                let recon = ReconConfig {
                    seed: derive_seed(cfg.seed, &keys),
                    ..*recon
                };
                supervised_loss(params, model, &sample.kspace, &sample.target, &recon)
            }
            Objective::Finetune { recon, frozen } => {
                let recon = ReconConfig {
                    sigma: cfg.sigma,
                    samples: cfg.samples,
                    seed: derive_seed(cfg.seed, &keys),
                    ..*recon
                };
                let terms = FinetuneTerms {
                    lambda_ell: cfg.lambda_ell,
                    ustab: UStabTerms {
                        reference: cfg.reference,
                        frozen: frozen.as_ref(),
                        fresh_noise: cfg.fresh_ustab_noise,
                    },
                };
                finetune_loss(params, model, &sample.kspace, &sample.target, &recon, &terms)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub wall_time_s: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub next_epoch: usize,
    pub best: DenoiserParams,
    pub best_val_psnr: Option<f64>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    denoiser: DenoiserConfig,
    next_epoch: usize,
    adam_step: u64,
    best_val_psnr: Option<f64>,
    best_epoch: Option<usize>,
    log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: DenoiserParams) -> Self {
        Self {
            adam: AdamState::new(params.len()),
            best: params.clone(),
            params,
            next_epoch: 0,
            best_val_psnr: None,
            best_epoch: None,
            log: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = StateMeta {
            denoiser: *self.params.config(),
            next_epoch: self.next_epoch,
            adam_step: self.adam.step,
            best_val_psnr: self.best_val_psnr,
            best_epoch: self.best_epoch,
            log: self.log.clone(),
        };
        let mut payload = self.params.flatten();
        payload.extend_from_slice(&self.adam.m);
        payload.extend_from_slice(&self.adam.v);
        payload.extend_from_slice(self.best.values());
        write_container(path, STATE_KIND, &meta, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (header, payload) = read_container::<StateMeta>(path, STATE_KIND)?;
        let meta = header.meta;
        let n = meta.denoiser.param_count();
        if payload.len() != 4 * n {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                message: format!("training state holds {} values, expected {}", payload.len(), 4 * n),
            });
        }
        let chunk = |i: usize| payload[i * n..(i + 1) * n].to_vec();
        Ok(Self {
            params: DenoiserParams::unflatten(meta.denoiser, chunk(0))?,
            adam: AdamState {
                m: chunk(1),
                v: chunk(2),
                step: meta.adam_step,
            },
            next_epoch: meta.next_epoch,
            best: DenoiserParams::unflatten(meta.denoiser, chunk(3))?,
            best_val_psnr: meta.best_val_psnr,
            best_epoch: meta.best_epoch,
            log: meta.log,
        })
    }
}

/// Validation data and the reconstructor used to score it.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub data: &'a Dataset,
    pub recon: &'a ReconConfig,
}

/// Runs epochs `state.next_epoch .. cfg.epochs`.
///
/// Batches come from a seeded per-epoch shuffle; per-sample losses within a
/// batch may run in parallel and their gradients are averaged in a fixed
/// pairwise order. After every epoch the validation PSNR decides whether the
/// parameters become the new best, and `on_epoch` sees the updated state.
pub fn train(
    objective: &Objective,
    cfg: &TrainConfig,
    data: &Dataset,
    validation: Option<Validation>,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    objective.validate(cfg)?;
    if data.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    if state.params.len() != state.adam.m.len() {
        return Err(CoreError::dimension(
            "optimizer state length",
            state.params.len(),
            state.adam.m.len(),
        ));
    }
    let model = data.acquisition_model()?;
    let schedule = cfg.schedule();
    while state.next_epoch < cfg.epochs {
        let epoch = state.next_epoch;
        let started = Instant::now();
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        )));
        let mut losses = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let params = &state.params;
            let outputs = batch
                .par_iter()
                .map(|&i| objective.sample_loss(cfg, params, &model, &data.samples[i], epoch))
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<&[f64]> = outputs.iter().map(|o| o.grad.as_slice()).collect();
            let inv = 1.0 / batch.len() as f64;
            let grad: Vec<f64> = pairwise_sum_rows(&rows).into_iter().map(|g| g * inv).collect();
            losses.extend(outputs.iter().map(|o| o.value));
            adam_step(
                &mut state.adam,
                state.params.values_mut(),
                &grad,
                lr,
                (cfg.beta1, cfg.beta2),
                cfg.eps_hat,
            )?;
        }
        let train_loss = pairwise_sum(&losses) / losses.len() as f64;
        let (val_psnr, val_ssim) = match validation {
            Some(v) if !v.data.is_empty() => {
                let m = ModelUnderTest {
                    label: objective.name().to_string(),
                    params: state.params.clone(),
                    recon: *v.recon,
                };
                let s = summarize(&evaluate_model(&m, v.data, Perturbation::Clean)?);
                (s.psnr_mean, s.ssim_mean)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let improved = match state.best_val_psnr {
            _ if val_psnr.is_nan() => true,
            None => true,
            Some(best) => val_psnr > best,
        };
        if improved {
            state.best = state.params.clone();
            state.best_val_psnr = (!val_psnr.is_nan()).then_some(val_psnr);
            state.best_epoch = Some(epoch);
        }
        state.log.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_psnr,
            val_ssim,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        state.next_epoch += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Pre-trains a denoiser from `init`; the result's `best` is the checkpoint.
pub fn run_pretrain(
    data: &Dataset,
    validation: Option<Validation>,
    cfg: &TrainConfig,
    init: DenoiserParams,
) -> Result<TrainState> {
    train(&Objective::Pretrain, cfg, data, validation, TrainState::new(init), |_| Ok(()))
}

/// UStab fine-tuning starting from pre-trained weights.
pub fn run_finetune(
    data: &Dataset,
    validation: Option<Validation>,
    cfg: &TrainConfig,
    recon: &ReconConfig,
    theta_pre: DenoiserParams,
    frozen: Option<DenoiserParams>,
) -> Result<TrainState> {
    let objective = Objective::Finetune {
        recon: *recon,
        frozen,
    };
    train(&objective, cfg, data, validation, TrainState::new(theta_pre), |_| Ok(()))
}

/// Epoch log as CSV with columns `epoch, lr, train_loss, val_psnr, val_ssim, wall_time_s`.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| CoreError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if log.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "val_psnr", "val_ssim", "wall_time_s"])
            .map_err(err)?;
    }
    for r in log {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}
