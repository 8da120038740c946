use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use smug_core::dataset::DatasetConfig;
use smug_core::denoiser::DenoiserConfig;
use smug_core::robustness::{AttackConfig, SweepAxis, SweepSpec};
use smug_core::training::TrainConfig;
use smug_core::unrolling::ReconConfig;

use crate::error::{CliError, CliResult};

/// Values swept by `sweep` and the random-noise condition of `attack`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub epsilons: Vec<f64>,
    pub sampling_rates: Vec<f64>,
    pub unroll_steps: Vec<f64>,
    /// Std of the Gaussian noise added to `A^H y` for the noise condition.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.0, 0.001, 0.002, 0.004, 0.008],
            sampling_rates: vec![0.25, 0.5],
            unroll_steps: vec![8.0, 16.0],
            noise_sigma: 0.004,
            noise_seed: 0,
        }
    }
}

/// Everything a command needs; each section maps onto one core config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub denoiser: DenoiserConfig,
    pub recon: ReconConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub sweep: SweepSection,
}

impl RunConfig {
    /// Reads a config file, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset.validate()?;
        self.denoiser.validate()?;
        self.recon.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        if !(self.sweep.noise_sigma >= 0.0 && self.sweep.noise_sigma.is_finite()) {
            return Err(CliError::usage(format!(
                "sweep.noise_sigma must be finite and >= 0, got {}",
                self.sweep.noise_sigma
            )));
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline, as echoed into output directories.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Sweep values for `axis`, checked against the setting the models were trained at.
    pub fn sweep_spec(&self, axis: SweepAxis) -> CliResult<SweepSpec> {
        let (values, training) = match axis {
            SweepAxis::Epsilon => (self.sweep.epsilons.clone(), 0.0),
            SweepAxis::SamplingRate => (
                self.sweep.sampling_rates.clone(),
                1.0 / self.dataset.acceleration as f64,
            ),
            SweepAxis::UnrollSteps => (self.sweep.unroll_steps.clone(), self.recon.steps as f64),
        };
        let spec = SweepSpec { axis, values };
        spec.validate(training)?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"recon": {"stpes": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"recon": {"steps": 3}}"#).unwrap();
        assert_eq!(partial.recon.steps, 3);
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn sweep_values_must_contain_training_setting() {
        let mut c = RunConfig::default();
        assert!(c.sweep_spec(SweepAxis::SamplingRate).is_ok());
        c.sweep.unroll_steps = vec![4.0, 16.0];
        assert!(c.sweep_spec(SweepAxis::UnrollSteps).is_err());
    }
}
