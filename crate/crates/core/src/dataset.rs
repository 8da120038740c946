//! Simulated acquisitions and the on-disk dataset format.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{read_container, read_header, write_container};
use crate::mri::{build_cartesian_mask, synth_sensitivities, AcquisitionModel, SamplingMask};
use crate::phantom::generate_phantom;
use crate::{derive_seed, Complex64, ComplexImage, CoreError, KSpaceData, Result};

const DATASET_KIND: &str = "dataset";
const MASK_STREAM: u64 = 1;
const PHANTOM_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub acceleration: usize,
    pub acs_rows: usize,
    /// Std of the Gaussian noise added to each real and imaginary k-space component.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            coils: 4,
            n_train: 40,
            n_val: 8,
            n_test: 8,
            acceleration: 4,
            acs_rows: 4,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(CoreError::InvalidConfig(format!(
                "dataset images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.coils == 0 {
            return Err(CoreError::InvalidConfig("coils must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// First global sample index of a split. Splits occupy consecutive,
    /// non-overlapping index ranges, and every seed is derived from the index.
    fn first_index(&self, split: Split) -> u64 {
        (match split {
            Split::Train => 0,
            Split::Val => self.n_train,
            Split::Test => self.n_train + self.n_val,
        }) as u64
    }

    pub fn mask_seed(&self) -> u64 {
        derive_seed(self.seed, &[MASK_STREAM])
    }

    pub fn build_mask(&self, acceleration: usize) -> Result<SamplingMask> {
        build_cartesian_mask(
            self.height,
            self.width,
            acceleration,
            self.acs_rows,
            self.mask_seed(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.smug", self.name())
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub index: u64,
    pub phantom_seed: u64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub meta: SampleMeta,
    pub target: ComplexImage,
    pub kspace: KSpaceData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub config: DatasetConfig,
    pub split: Split,
    pub mask: SamplingMask,
    pub samples: Vec<SampleMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub split: Split,
    pub mask: SamplingMask,
    pub samples: Vec<Sample>,
}

/// `forward(model, t)` plus white Gaussian noise on the acquired rows.
///
/// Real and imaginary parts receive independent noise of std `noise_std`;
/// rows outside the mask stay exactly zero.
pub fn simulate_measurement(
    model: &AcquisitionModel,
    t: &ComplexImage,
    noise_std: f64,
    seed: u64,
) -> Result<KSpaceData> {
    if !(noise_std >= 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "noise_std must be >= 0, got {noise_std}"
        )));
    }
    let mut y = model.forward(t)?;
    if noise_std == 0.0 {
        return Ok(y);
    }
    let normal = Normal::new(0.0, noise_std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = model.mask().row_flags();
    let w = model.width();
    for c in 0..model.n_coils() {
        for (row, &k) in y.coil_mut(c).chunks_mut(w).zip(&kept) {
            if k {
                for v in row {
                    *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                }
            }
        }
    }
    Ok(y)
}

impl Dataset {
    /// Generates one split; a pure function of the configuration.
    pub fn generate(config: &DatasetConfig, split: Split) -> Result<Dataset> {
        config.validate()?;
        let mask = config.build_mask(config.acceleration)?;
        let model = AcquisitionModel::new(
            mask.clone(),
            synth_sensitivities(config.height, config.width, config.coils)?,
        )?;
        let first = config.first_index(split);
        let samples = (0..config.count(split) as u64)
            .into_par_iter()
            .map(|i| {
                let index = first + i;
                let meta = SampleMeta {
                    index,
                    phantom_seed: derive_seed(config.seed, &[PHANTOM_STREAM, index]),
                    noise_seed: derive_seed(config.seed, &[NOISE_STREAM, index]),
                };
                let target = generate_phantom(config.height, config.width, meta.phantom_seed)?;
                let kspace = simulate_measurement(&model, &target, config.noise_std, meta.noise_seed)?;
                Ok(Sample {
                    meta,
                    target,
                    kspace,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: config.clone(),
            split,
            mask,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn acquisition_model(&self) -> Result<AcquisitionModel> {
        AcquisitionModel::new(
            self.mask.clone(),
            synth_sensitivities(self.config.height, self.config.width, self.config.coils)?,
        )
    }

    /// Same targets and noise seeds measured with a mask at another acceleration.
    pub fn remeasure(&self, acceleration: usize) -> Result<Dataset> {
        let mask = self.config.build_mask(acceleration)?;
        let model = self.acquisition_model()?.with_mask(mask.clone())?;
        let samples = self
            .samples
            .par_iter()
            .map(|s| {
                Ok(Sample {
                    meta: s.meta.clone(),
                    target: s.target.clone(),
                    kspace: simulate_measurement(&model, &s.target, self.config.noise_std, s.meta.noise_seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: DatasetConfig {
                acceleration,
                ..self.config.clone()
            },
            split: self.split,
            mask,
            samples,
        })
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            config: self.config.clone(),
            split: self.split,
            mask: self.mask.clone(),
            samples: self.samples.iter().map(|s| s.meta.clone()).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut payload = Vec::new();
        for s in &self.samples {
            payload.extend(s.target.interleaved());
            payload.extend(s.kspace.data().iter().flat_map(|c| [c.re, c.im]));
        }
        write_container(path, DATASET_KIND, &self.header(), &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let (header, payload) = read_container::<DatasetHeader>(path, DATASET_KIND)?;
        let DatasetHeader {
            config,
            split,
            mask,
            samples: metas,
        } = header.meta;
        config.validate()?;
        mask.validate()?;
        let (h, w, c) = (config.height, config.width, config.coils);
        let per_sample = 2 * h * w * (1 + c);
        if payload.len() != per_sample * metas.len() {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                message: format!(
                    "payload holds {} values, header describes {} samples of {per_sample}",
                    payload.len(),
                    metas.len()
                ),
            });
        }
        let samples = metas
            .into_iter()
            .zip(payload.chunks_exact(per_sample))
            .map(|(meta, chunk)| {
                let (t, k) = chunk.split_at(2 * h * w);
                let kdata = k.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
                Ok(Sample {
                    meta,
                    target: ComplexImage::from_interleaved(h, w, t)?,
                    kspace: KSpaceData::new(c, h, w, kdata)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config,
            split,
            mask,
            samples,
        })
    }

    /// SHA-256 over the serialized header and every payload value, hex encoded.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.header())?);
        for s in &self.samples {
            for v in s.target.interleaved() {
                h.update(v.to_le_bytes());
            }
            for c in s.kspace.data() {
                h.update(c.re.to_le_bytes());
                h.update(c.im.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn read_header(path: impl AsRef<Path>) -> Result<DatasetHeader> {
        Ok(read_header::<DatasetHeader>(path, DATASET_KIND)?.meta)
    }
}
