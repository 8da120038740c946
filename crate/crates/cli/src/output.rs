use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use smug_core::dataset::{Dataset, Split};
use smug_core::denoiser::DenoiserParams;
use smug_core::robustness::ModelUnderTest;
use smug_core::unrolling::{Mode, ReconConfig};
use smug_core::ComplexImage;

use crate::error::{CliError, CliResult};

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let occupied = !dir.is_dir()
            || fs::read_dir(dir)
                .map_err(|e| CliError::io(dir, e))?
                .next()
                .is_some();
        if occupied && !force {
            return Err(CliError::usage(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Binary PGM (P5) of the magnitude, scaled so `data_range` maps to 255.
pub fn pgm_bytes(img: &ComplexImage, data_range: f64) -> Vec<u8> {
    let (h, w) = img.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.magnitude().iter().map(|m| {
        let v = if data_range > 0.0 { m / data_range } else { 0.0 };
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    out
}

pub fn load_split(data_dir: &Path, split: Split) -> CliResult<Dataset> {
    Ok(Dataset::load(data_dir.join(split.file_name()))?)
}

/// `LABEL=PATH` as given on the command line.
pub fn parse_labeled(spec: &str) -> CliResult<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
        _ => Err(CliError::usage(format!("expected LABEL=PATH, got {spec:?}"))),
    }
}

pub fn load_checkpoint(path: &Path) -> CliResult<(DenoiserParams, BTreeMap<String, String>)> {
    DenoiserParams::load(path).map_err(|e| match CliError::from(e) {
        CliError::Usage(m) => CliError::Usage(format!("checkpoint {}: {m}", path.display())),
        CliError::Runtime(m) => CliError::Runtime(format!("checkpoint {}: {m}", path.display())),
    })
}

/// Reconstruction mode a checkpoint was trained for, if it records one.
pub fn checkpoint_mode(info: &BTreeMap<String, String>) -> CliResult<Option<Mode>> {
    info.get("mode")
        .map(|m| m.parse::<Mode>().map_err(|e| CliError::Runtime(e.to_string())))
        .transpose()
}

/// Provenance of one evaluated model, recorded in JSON sidecars.
#[derive(Clone, Debug, Serialize)]
pub struct ModelRecord {
    pub label: String,
    pub checkpoint: String,
    pub params_digest: String,
    pub mode: Mode,
    pub stage: Option<String>,
}

/// Loads `LABEL=PATH` checkpoints; each runs in the mode it was trained for,
/// falling back to the configured mode for pre-trained denoisers.
pub fn load_models(specs: &[String], recon: &ReconConfig) -> CliResult<(Vec<ModelUnderTest>, Vec<ModelRecord>)> {
    if specs.is_empty() {
        return Err(CliError::usage("at least one --model LABEL=PATH is required"));
    }
    let mut models = Vec::new();
    let mut records = Vec::new();
    for spec in specs {
        let (label, path) = parse_labeled(spec)?;
        if models.iter().any(|m: &ModelUnderTest| m.label == label) {
            return Err(CliError::usage(format!("model label {label:?} given twice")));
        }
        let (params, info) = load_checkpoint(&path)?;
        let mode = checkpoint_mode(&info)?.unwrap_or(recon.mode);
        records.push(ModelRecord {
            label: label.clone(),
            checkpoint: path.display().to_string(),
            params_digest: params.digest(),
            mode,
            stage: info.get("stage").cloned(),
        });
        models.push(ModelUnderTest {
            label,
            params,
            recon: ReconConfig { mode, ..*recon },
        });
    }
    Ok((models, records))
}
