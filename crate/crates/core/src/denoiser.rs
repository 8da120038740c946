//! Residual CNN denoiser over the two-channel (real, imaginary) image.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use smug_autodiff::{Gradients, NodeId, Tape, Tensor};

use crate::container::{read_container, write_container};
use crate::{ComplexImage, CoreError, Result};

const CHECKPOINT_KIND: &str = "denoiser";
const IMAGE_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            channels: 16,
            kernel_size: 3,
            residual: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "denoiser depth and channels must be >= 1, got depth {} channels {}",
                self.depth, self.channels
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(CoreError::InvalidConfig(format!(
                "denoiser kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// `(C_out, C_in)` per layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let c_in = if l == 0 { IMAGE_CHANNELS } else { self.channels };
                let c_out = if l + 1 == self.depth {
                    IMAGE_CHANNELS
                } else {
                    self.channels
                };
                (c_out, c_in)
            })
            .collect()
    }

    /// Total number of scalars in kernels and biases.
    ///
    /// With `k2 = k * k`: a single layer has `4 k2 + 2`; otherwise
    /// `(2C k2 + C) + (L - 2)(C^2 k2 + C) + (2C k2 + 2)`.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let c = self.channels;
        match self.depth {
            0 => 0,
            1 => 4 * k2 + 2,
            l => (2 * c * k2 + c) + (l - 2) * (c * c * k2 + c) + (2 * c * k2 + 2),
        }
    }
}

/// Denoiser weights stored as one flat vector, layer by layer, kernel then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    values: Vec<f64>,
}

/// Tape handles of every layer's kernel and bias.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    layers: Vec<(NodeId, NodeId)>,
    lens: Vec<(usize, usize)>,
}

impl ParamNodes {
    /// Flattened gradient in the same layout as [`DenoiserParams::flatten`].
    pub fn gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (&(k, b), &(nk, nb)) in self.layers.iter().zip(&self.lens) {
            for (id, n) in [(k, nk), (b, nb)] {
                match grads.get(id) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat_n(0.0, n)),
                }
            }
        }
        out
    }
}

impl DenoiserParams {
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            values: vec![0.0; config.param_count()],
        })
    }

    /// Kaiming uniform kernels (bound `sqrt(6 / fan_in)`, fan_in = `C_in k^2`), zero biases.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = config.kernel_size * config.kernel_size;
        let mut values = Vec::with_capacity(config.param_count());
        for (c_out, c_in) in config.layer_channels() {
            let bound = (6.0 / (c_in * k2) as f64).sqrt();
            values.extend((0..c_out * c_in * k2).map(|_| rng.random_range(-bound..bound)));
            values.extend(std::iter::repeat_n(0.0, c_out));
        }
        Ok(Self { config, values })
    }

    pub fn unflatten(config: DenoiserConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(CoreError::dimension(
                "denoiser parameter vector length",
                config.param_count(),
                values.len(),
            ));
        }
        Ok(Self { config, values })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(kernel, bias)` tensors per layer.
    pub fn layers(&self) -> Vec<(Tensor, Tensor)> {
        let k = self.config.kernel_size;
        let mut offset = 0;
        self.config
            .layer_channels()
            .into_iter()
            .map(|(c_out, c_in)| {
                let nk = c_out * c_in * k * k;
                let kernel = Tensor::new([c_out, c_in, k, k], self.values[offset..offset + nk].to_vec())
                    .expect("layout matches config");
                let bias = Tensor::new([c_out], self.values[offset + nk..offset + nk + c_out].to_vec())
                    .expect("layout matches config");
                offset += nk + c_out;
                (kernel, bias)
            })
            .collect()
    }

    /// Places the weights on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &Tape, trainable: bool) -> ParamNodes {
        let put = |t: Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        let layers = self.layers();
        ParamNodes {
            lens: layers.iter().map(|(k, b)| (k.len(), b.len())).collect(),
            layers: layers.into_iter().map(|(k, b)| (put(k), put(b))).collect(),
        }
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn denoise(&self, x: &ComplexImage) -> Result<ComplexImage> {
        let tape = Tape::new();
        let nodes = self.register(&tape, false);
        let xn = tape.constant(x.to_tensor());
        let out = denoise_on_tape(&tape, &self.config, &nodes, xn)?;
        ComplexImage::from_tensor(&tape.value(out))
    }

    pub fn save(&self, path: impl AsRef<Path>, info: &BTreeMap<String, String>) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config,
            param_count: self.values.len(),
            digest: self.digest(),
            info: info.clone(),
        };
        write_container(path, CHECKPOINT_KIND, &meta, &self.values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        let (header, values) = read_container::<CheckpointMeta>(path, CHECKPOINT_KIND)?;
        let meta = header.meta;
        if meta.param_count != meta.config.param_count() {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                message: format!(
                    "parameter count {} does not match architecture ({})",
                    meta.param_count,
                    meta.config.param_count()
                ),
            });
        }
        let params = Self::unflatten(meta.config, values)?;
        if params.digest() != meta.digest {
            return Err(CoreError::Format {
                path: path.to_path_buf(),
                message: "parameter digest mismatch".into(),
            });
        }
        Ok((params, meta.info))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: DenoiserConfig,
    param_count: usize,
    digest: String,
    info: BTreeMap<String, String>,
}

/// Applies the network to `x`, shaped `[H, W, 2]` or `[B, H, W, 2]`.
pub fn denoise_on_tape(
    tape: &Tape,
    config: &DenoiserConfig,
    params: &ParamNodes,
    x: NodeId,
) -> Result<NodeId> {
    let shape = tape.shape(x);
    if !matches!(shape.as_slice(), [_, _, 2] | [_, _, _, 2]) {
        return Err(CoreError::dimension(
            "denoiser input",
            "[H, W, 2] or [B, H, W, 2]",
            format!("{shape:?}"),
        ));
    }
    if params.layers.len() != config.depth {
        return Err(CoreError::dimension(
            "denoiser layers",
            config.depth,
            params.layers.len(),
        ));
    }
    let mut h = tape.channels_first(x)?;
    for (l, &(k, b)) in params.layers.iter().enumerate() {
        h = tape.conv2d(h, k, b)?;
        if l + 1 < params.layers.len() {
            h = tape.relu(h)?;
        }
    }
    let out = tape.channels_last(h)?;
    if config.residual {
        Ok(tape.add(out, x)?)
    } else {
        Ok(out)
    }
}
