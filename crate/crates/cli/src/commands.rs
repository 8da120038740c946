use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smug_core::container::write_container;
use smug_core::dataset::{Dataset, Split};
use smug_core::denoiser::DenoiserParams;
use smug_core::robustness::{
    condition_table, curves, image_metrics, read_rows_csv, run_reference_ablation, run_sweep, AttackTarget, Curve,
    SweepAxis, SweepRow,
};
use smug_core::training::{train, write_log_csv, Objective, TrainState, UStabReference, Validation};
use smug_core::unrolling::{reconstruct, Mode, TraceSummary};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{
    checkpoint_mode, load_checkpoint, load_models, load_split, parse_labeled, pgm_bytes, prepare_out_dir, write_csv,
    write_json, write_text, ModelRecord,
};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "denoiser.ckpt";
pub const STATE_FILE: &str = "state.smug";
pub const LOG_FILE: &str = "log.csv";
pub const CONDITIONS_FILE: &str = "conditions.csv";
pub const CONDITIONS_SIDECAR: &str = "conditions.json";

/// Flags shared by every command.
#[derive(Clone, Debug)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub force: bool,
}

impl Common {
    /// Loads the config and applies `--seed` to every run-time seed.
    fn run_config(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.recon.seed = seed;
            cfg.attack.seed = seed;
            cfg.sweep.noise_seed = seed;
        }
        Ok(cfg)
    }
}

fn begin(common: &Common, cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    prepare_out_dir(&common.out, common.force)?;
    write_text(&common.out.join(CONFIG_FILE), &cfg.to_json())
}

#[derive(Serialize)]
struct SplitSummary {
    split: String,
    samples: usize,
    digest: String,
}

#[derive(Serialize)]
struct DataSummary {
    height: usize,
    width: usize,
    coils: usize,
    acceleration: usize,
    acs_rows: usize,
    kept_rows: usize,
    sampling_rate: f64,
    splits: Vec<SplitSummary>,
}

pub fn generate_data(common: &Common, acceleration: Option<usize>) -> CliResult<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
    }
    if let Some(r) = acceleration {
        cfg.dataset.acceleration = r;
    }
    begin(common, &cfg)?;
    let mut splits = Vec::new();
    let mut mask = None;
    for split in Split::ALL {
        let data = Dataset::generate(&cfg.dataset, split)?;
        data.save(common.out.join(split.file_name()))?;
        splits.push(SplitSummary {
            split: split.name().to_string(),
            samples: data.len(),
            digest: data.digest()?,
        });
        mask = Some(data.mask);
    }
    let mask = mask.expect("three splits");
    let summary = DataSummary {
        height: cfg.dataset.height,
        width: cfg.dataset.width,
        coils: cfg.dataset.coils,
        acceleration: cfg.dataset.acceleration,
        acs_rows: cfg.dataset.acs_rows,
        kept_rows: mask.kept_rows.len(),
        sampling_rate: mask.sampling_rate(),
        splits,
    };
    write_json(&common.out.join("summary.json"), &summary)?;
    for s in &summary.splits {
        println!("{}: {} samples", s.split, s.samples);
    }
    println!(
        "images {}x{}, {} coils; mask keeps {}/{} rows ({:.1}% sampling rate, R={}, {} ACS rows)",
        summary.height,
        summary.width,
        summary.coils,
        summary.kept_rows,
        summary.height,
        100.0 * summary.sampling_rate,
        summary.acceleration,
        summary.acs_rows
    );
    Ok(())
}

/// Which training objective a training command runs.
#[derive(Clone, Debug)]
pub enum TrainKind {
    Pretrain,
    /// End-to-end supervised training of the unrolled network.
    Supervised { init: Option<PathBuf> },
    Finetune {
        init: PathBuf,
        frozen: Option<PathBuf>,
    },
}

/// Overrides accepted by the training commands.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub mode: Option<Mode>,
    pub reference: Option<UStabReference>,
    pub lambda_ell: Option<f64>,
    pub resume: bool,
}

pub fn run_training(common: &Common, data_dir: &Path, kind: &TrainKind, ov: &TrainOverrides) -> CliResult<()> {
    let mut cfg = common.run_config()?;
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = ov.mode {
        cfg.recon.mode = m;
    }
    if let Some(r) = ov.reference {
        cfg.train.reference = r;
    }
    if let Some(l) = ov.lambda_ell {
        cfg.train.lambda_ell = l;
    }
    let train_data = load_split(data_dir, Split::Train)?;
    let val_data = load_split(data_dir, Split::Val)?;
    cfg.dataset = train_data.config.clone();

    let mut info = BTreeMap::new();
    let (init, objective) = match kind {
        TrainKind::Pretrain => {
            info.insert("stage".to_string(), "pretrain".to_string());
            (DenoiserParams::init(cfg.denoiser, cfg.train.seed)?, Objective::Pretrain)
        }
        TrainKind::Supervised { init } => {
            info.insert("stage".to_string(), "supervised".to_string());
            info.insert("mode".to_string(), cfg.recon.mode.name().to_string());
            let params = match init {
                Some(p) => load_checkpoint(p)?.0,
                None => DenoiserParams::init(cfg.denoiser, cfg.train.seed)?,
            };
            (params, Objective::Supervised { recon: cfg.recon })
        }
        TrainKind::Finetune { init, frozen } => {
            if !matches!(cfg.recon.mode, Mode::Smug | Mode::SmugV0) {
                return Err(CliError::usage(format!(
                    "fine-tuning needs a smoothed unrolled mode (smug or smugv0), got {}",
                    cfg.recon.mode
                )));
            }
            info.insert("stage".to_string(), "finetune".to_string());
            info.insert("mode".to_string(), cfg.recon.mode.name().to_string());
            info.insert("reference".to_string(), cfg.train.reference.name().to_string());
            let frozen = match frozen {
                Some(p) => {
                    let params = load_checkpoint(p)?.0;
                    info.insert("frozen_digest".to_string(), params.digest());
                    Some(params)
                }
                None => None,
            };
            let params = load_checkpoint(init)?.0;
            (
                params,
                Objective::Finetune {
                    recon: cfg.recon,
                    frozen,
                },
            )
        }
    };
    info.insert("init_digest".to_string(), init.digest());
    cfg.denoiser = *init.config();

    let out = &common.out;
    let state = if ov.resume {
        cfg.validate()?;
        let echoed = std::fs::read_to_string(out.join(CONFIG_FILE)).map_err(|e| CliError::io(&out.join(CONFIG_FILE), e))?;
        if echoed != cfg.to_json() {
            return Err(CliError::usage(format!(
                "cannot resume: effective config differs from {}",
                out.join(CONFIG_FILE).display()
            )));
        }
        TrainState::load(out.join(STATE_FILE))?
    } else {
        begin(common, &cfg)?;
        TrainState::new(init)
    };

    let save = |s: &TrainState| -> smug_core::Result<()> {
        s.save(out.join(STATE_FILE))?;
        write_log_csv(out.join(LOG_FILE), &s.log)?;
        s.best.save(out.join(CHECKPOINT_FILE), &info)
    };
    let validation = Validation {
        data: &val_data,
        recon: &cfg.recon,
    };
    let state = train(&objective, &cfg.train, &train_data, Some(validation), state, |s| {
        let r = s.log.last().expect("epoch logged");
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train loss {:.6e}  val PSNR {:.3} dB  SSIM {:.4}",
            r.epoch, r.lr, r.train_loss, r.val_psnr, r.val_ssim
        );
        save(s)
    })?;
    save(&state)?;
    match (state.best_epoch, state.best_val_psnr) {
        (Some(e), Some(p)) => println!("best validation PSNR {p:.3} dB at epoch {e}"),
        _ => println!("no epochs run; checkpoint holds the initialization"),
    }
    println!("checkpoint written to {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    index: u64,
    height: usize,
    width: usize,
    mode: Mode,
    params_digest: String,
    data_range: f64,
    trace: TraceSummary,
}

#[derive(Serialize)]
struct MetricsLine {
    index: u64,
    psnr: f64,
    ssim: f64,
}

pub fn reconstruct_split(
    common: &Common,
    data_dir: &Path,
    checkpoint: &Path,
    mode: Option<Mode>,
    split: Split,
) -> CliResult<()> {
    let mut cfg = common.run_config()?;
    if let Some(m) = mode {
        cfg.recon.mode = m;
    }
    let (params, info) = load_checkpoint(checkpoint)?;
    if let Some(trained) = checkpoint_mode(&info)? {
        if trained != cfg.recon.mode {
            return Err(CliError::usage(format!(
                "checkpoint {} was trained for mode {trained} but the config requests {}",
                checkpoint.display(),
                cfg.recon.mode
            )));
        }
    }
    let data = load_split(data_dir, split)?;
    cfg.dataset = data.config.clone();
    cfg.denoiser = *params.config();
    begin(common, &cfg)?;
    let model = data.acquisition_model()?;
    let results = data
        .samples
        .par_iter()
        .map(|s| {
            let recon = cfg.recon.reseeded(&[s.meta.index]);
            let (out, trace) = reconstruct(&recon, &params, &model, &s.kspace)?;
            let metrics = image_metrics(&out, &s.target)?;
            let range = s.target.magnitude().into_iter().fold(0.0, f64::max);
            Ok((s.meta.index, out, trace.summary(), metrics, range))
        })
        .collect::<smug_core::Result<Vec<_>>>()?;
    let (h, w) = model.dims();
    let mut lines = Vec::new();
    for (index, out, trace, metrics, range) in results {
        let stem = format!("recon_{index:04}");
        let meta = ImageMeta {
            index,
            height: h,
            width: w,
            mode: cfg.recon.mode,
            params_digest: params.digest(),
            data_range: range,
            trace,
        };
        write_container(common.out.join(format!("{stem}.smug")), "image", &meta, &out.interleaved())?;
        let pgm = common.out.join(format!("{stem}.pgm"));
        std::fs::write(&pgm, pgm_bytes(&out, range)).map_err(|e| CliError::io(&pgm, e))?;
        lines.push(MetricsLine {
            index,
            psnr: metrics.psnr,
            ssim: metrics.ssim,
        });
    }
    write_csv(&common.out.join("metrics.csv"), &lines)?;
    let n = lines.len() as f64;
    println!(
        "{} {} images reconstructed ({}): mean PSNR {:.3} dB, mean SSIM {:.4}",
        lines.len(),
        split.name(),
        cfg.recon.mode,
        lines.iter().map(|l| l.psnr).sum::<f64>() / n,
        lines.iter().map(|l| l.ssim).sum::<f64>() / n
    );
    Ok(())
}

/// JSON sidecar written next to every results table.
#[derive(Serialize, Deserialize)]
pub struct Sidecar<M, C> {
    pub dataset_digest: String,
    pub data_range: String,
    pub models: Vec<M>,
    pub config: RunConfig,
    pub curves: Vec<C>,
}

const DATA_RANGE_NOTE: &str = "max magnitude of each ground-truth image";

fn write_table(out: &Path, stem: &str, rows: &[SweepRow], sidecar: &Sidecar<ModelRecord, Curve>) -> CliResult<()> {
    write_csv(&out.join(format!("{stem}.csv")), rows)?;
    write_json(&out.join(format!("{stem}.json")), sidecar)?;
    for r in rows {
        println!(
            "{:<14} {:<14} {:>8.4}  PSNR {:>7.3} ± {:<6.3} SSIM {:.4} ± {:.4}",
            r.model, r.axis, r.value, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std
        );
    }
    Ok(())
}

/// Overrides accepted by the evaluation commands.
#[derive(Clone, Debug, Default)]
pub struct EvalOverrides {
    pub epsilon: Option<f64>,
    pub attack_base: bool,
}

fn eval_config(common: &Common, test: &Dataset, ov: &EvalOverrides) -> CliResult<RunConfig> {
    let mut cfg = common.run_config()?;
    cfg.dataset = test.config.clone();
    if let Some(e) = ov.epsilon {
        cfg.attack.epsilon = e;
    }
    if ov.attack_base {
        cfg.attack.target = AttackTarget::Base;
    }
    Ok(cfg)
}

/// Clean, noisy-input and attacked accuracy of each model (one results table).
pub fn attack(common: &Common, data_dir: &Path, model_specs: &[String], ov: &EvalOverrides) -> CliResult<()> {
    let test = load_split(data_dir, Split::Test)?;
    let cfg = eval_config(common, &test, ov)?;
    let (models, records) = load_models(model_specs, &cfg.recon)?;
    begin(common, &cfg)?;
    let rows = condition_table(&models, &test, cfg.sweep.noise_sigma, cfg.sweep.noise_seed, &cfg.attack)?;
    let sidecar = Sidecar {
        dataset_digest: test.digest()?,
        data_range: DATA_RANGE_NOTE.into(),
        models: records,
        config: cfg,
        curves: Vec::new(),
    };
    write_table(&common.out, "conditions", &rows, &sidecar)
}

pub fn sweep(
    common: &Common,
    data_dir: &Path,
    model_specs: &[String],
    axis: SweepAxis,
    ov: &EvalOverrides,
) -> CliResult<()> {
    let test = load_split(data_dir, Split::Test)?;
    let cfg = eval_config(common, &test, ov)?;
    let spec = cfg.sweep_spec(axis)?;
    let (models, records) = load_models(model_specs, &cfg.recon)?;
    begin(common, &cfg)?;
    let rows = run_sweep(&spec, &models, &test, &cfg.attack)?;
    let sidecar = Sidecar {
        dataset_digest: test.digest()?,
        data_range: DATA_RANGE_NOTE.into(),
        models: records,
        config: cfg,
        curves: curves(&rows),
    };
    write_table(&common.out, &format!("sweep_{}", axis.name()), &rows, &sidecar)
}

pub fn ablation(common: &Common, data_dir: &Path, variant_specs: &[String], ov: &EvalOverrides) -> CliResult<()> {
    let test = load_split(data_dir, Split::Test)?;
    let cfg = eval_config(common, &test, ov)?;
    let spec = cfg.sweep_spec(SweepAxis::Epsilon)?;
    let mut refs = Vec::new();
    let mut specs = Vec::new();
    for v in variant_specs {
        let (name, path) = parse_labeled(v)?;
        let r: UStabReference = name.parse().map_err(|e: smug_core::CoreError| CliError::usage(e.to_string()))?;
        refs.push(r);
        specs.push(format!("{}={}", r.name(), path.display()));
    }
    let (models, records) = load_models(&specs, &cfg.recon)?;
    begin(common, &cfg)?;
    let variants: Vec<_> = refs.into_iter().zip(models).collect();
    let rows = run_reference_ablation(&variants, &test, &spec.values, &cfg.attack)?;
    let sidecar = Sidecar {
        dataset_digest: test.digest()?,
        data_range: DATA_RANGE_NOTE.into(),
        models: records,
        config: cfg,
        curves: curves(&rows),
    };
    write_table(&common.out, "ablation", &rows, &sidecar)
}

/// One model's line of the comparison table.
#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub clean_psnr_mean: f64,
    pub clean_psnr_std: f64,
    pub clean_ssim_mean: f64,
    pub clean_ssim_std: f64,
    pub noise_psnr_mean: f64,
    pub noise_psnr_std: f64,
    pub noise_ssim_mean: f64,
    pub noise_ssim_std: f64,
    pub robust_psnr_mean: f64,
    pub robust_psnr_std: f64,
    pub robust_ssim_mean: f64,
    pub robust_ssim_std: f64,
    pub delta_clean_psnr: f64,
    pub delta_clean_ssim: f64,
    pub delta_noise_psnr: f64,
    pub delta_noise_ssim: f64,
    pub delta_robust_psnr: f64,
    pub delta_robust_ssim: f64,
}

#[derive(Serialize)]
struct ReportInputs {
    runs: Vec<String>,
    baseline: String,
    dataset_digest: String,
}

#[derive(Deserialize)]
struct SidecarDigest {
    dataset_digest: String,
}

fn condition<'a>(rows: &'a [SweepRow], model: &str, axis: &str) -> CliResult<&'a SweepRow> {
    rows.iter()
        .find(|r| r.model == model && r.axis == axis)
        .ok_or_else(|| CliError::usage(format!("no {axis} row for model {model}")))
}

fn cell(mean: f64, std: f64, delta: f64, digits: usize) -> String {
    format!("{mean:.digits$} ± {std:.digits$} ({delta:+.digits$})")
}

/// Merges condition tables from several runs into one table with deltas
/// against the baseline model.
pub fn report(out: &Path, force: bool, runs: &[PathBuf], baseline: &str) -> CliResult<()> {
    if runs.is_empty() {
        return Err(CliError::usage("at least one --run directory is required"));
    }
    let mut digest: Option<String> = None;
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    for run in runs {
        let side = run.join(CONDITIONS_SIDECAR);
        let text = std::fs::read_to_string(&side).map_err(|e| CliError::io(&side, e))?;
        let d: SidecarDigest =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", side.display())))?;
        match &digest {
            Some(first) if *first != d.dataset_digest => {
                return Err(CliError::usage(format!(
                    "{} was evaluated on a different test set (dataset digest {} vs {first})",
                    run.display(),
                    d.dataset_digest
                )))
            }
            _ => digest = Some(d.dataset_digest),
        }
        let run_rows = read_rows_csv(run.join(CONDITIONS_FILE))?;
        let mut labels: Vec<String> = Vec::new();
        for r in &run_rows {
            if !labels.contains(&r.model) {
                labels.push(r.model.clone());
            }
        }
        if let Some(dup) = labels.iter().find(|l| order.contains(l)) {
            return Err(CliError::usage(format!("model {dup} appears in more than one run")));
        }
        order.extend(labels);
        rows.extend(run_rows);
    }
    if !order.iter().any(|m| m == baseline) {
        return Err(CliError::usage(format!(
            "baseline model {baseline:?} not found; available: {}",
            order.join(", ")
        )));
    }
    let base: Vec<&SweepRow> = ["clean", "noise", "robust"]
        .iter()
        .map(|a| condition(&rows, baseline, a))
        .collect::<CliResult<_>>()?;
    let mut table = Vec::new();
    for model in &order {
        let c = condition(&rows, model, "clean")?;
        let n = condition(&rows, model, "noise")?;
        let r = condition(&rows, model, "robust")?;
        table.push(ReportRow {
            model: model.clone(),
            clean_psnr_mean: c.psnr_mean,
            clean_psnr_std: c.psnr_std,
            clean_ssim_mean: c.ssim_mean,
            clean_ssim_std: c.ssim_std,
            noise_psnr_mean: n.psnr_mean,
            noise_psnr_std: n.psnr_std,
            noise_ssim_mean: n.ssim_mean,
            noise_ssim_std: n.ssim_std,
            robust_psnr_mean: r.psnr_mean,
            robust_psnr_std: r.psnr_std,
            robust_ssim_mean: r.ssim_mean,
            robust_ssim_std: r.ssim_std,
            delta_clean_psnr: c.psnr_mean - base[0].psnr_mean,
            delta_clean_ssim: c.ssim_mean - base[0].ssim_mean,
            delta_noise_psnr: n.psnr_mean - base[1].psnr_mean,
            delta_noise_ssim: n.ssim_mean - base[1].ssim_mean,
            delta_robust_psnr: r.psnr_mean - base[2].psnr_mean,
            delta_robust_ssim: r.ssim_mean - base[2].ssim_mean,
        });
    }

    prepare_out_dir(out, force)?;
    let inputs = ReportInputs {
        runs: runs.iter().map(|r| r.display().to_string()).collect(),
        baseline: baseline.to_string(),
        dataset_digest: digest.expect("at least one run"),
    };
    write_json(&out.join(CONFIG_FILE), &inputs)?;
    write_csv(&out.join("report.csv"), &table)?;

    let mut md = String::new();
    md.push_str("| Model | Clean PSNR | Clean SSIM | Noise PSNR | Noise SSIM | Robust PSNR | Robust SSIM |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for t in &table {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            t.model,
            cell(t.clean_psnr_mean, t.clean_psnr_std, t.delta_clean_psnr, 2),
            cell(t.clean_ssim_mean, t.clean_ssim_std, t.delta_clean_ssim, 3),
            cell(t.noise_psnr_mean, t.noise_psnr_std, t.delta_noise_psnr, 2),
            cell(t.noise_ssim_mean, t.noise_ssim_std, t.delta_noise_ssim, 3),
            cell(t.robust_psnr_mean, t.robust_psnr_std, t.delta_robust_psnr, 2),
            cell(t.robust_ssim_mean, t.robust_ssim_std, t.delta_robust_ssim, 3),
        ));
    }
    md.push_str(&format!(
        "\nMean ± population std over the test images; parentheses give the difference from {baseline}.\n"
    ));
    write_text(&out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
