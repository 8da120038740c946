use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Cartesian phase-encode undersampling mask.
///
/// Rows in `kept_rows` are acquired in full; all other k-space rows are zero.
/// Serialized with `kept_rows` spelled out so consumers never re-derive it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingMask {
    pub height: usize,
    pub width: usize,
    pub acceleration: usize,
    pub acs_rows: usize,
    pub seed: u64,
    pub kept_rows: Vec<usize>,
}

impl SamplingMask {
    pub fn row_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.height];
        for &r in &self.kept_rows {
            flags[r] = true;
        }
        flags
    }

    pub fn sampling_rate(&self) -> f64 {
        self.kept_rows.len() as f64 / self.height as f64
    }

    /// Fully sampled mask (acceleration 1).
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            acceleration: 1,
            acs_rows: 0,
            seed: 0,
            kept_rows: (0..height).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = None;
        for &r in &self.kept_rows {
            if r >= self.height || prev.is_some_and(|p| p >= r) {
                return Err(CoreError::InvalidConfig(format!(
                    "mask rows must be sorted, unique and < {}: {:?}",
                    self.height, self.kept_rows
                )));
            }
            prev = Some(r);
        }
        Ok(())
    }
}

/// Number of rows kept at acceleration `r`: `round(height / r)`.
pub fn rows_for_acceleration(height: usize, acceleration: usize) -> usize {
    (height as f64 / acceleration as f64).round() as usize
}

/// Keeps `acs_rows` central rows plus uniformly random extra rows drawn with
/// `seed`, for `round(height / acceleration)` rows in total.
pub fn build_cartesian_mask(
    height: usize,
    width: usize,
    acceleration: usize,
    acs_rows: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if acceleration == 0 {
        return Err(CoreError::InvalidConfig("acceleration must be >= 1".into()));
    }
    if height == 0 || width == 0 {
        return Err(CoreError::InvalidConfig("mask dimensions must be positive".into()));
    }
    let budget = rows_for_acceleration(height, acceleration);
    if budget < acs_rows {
        return Err(CoreError::InvalidConfig(format!(
            "row budget {budget} (height {height} / acceleration {acceleration}) is smaller than acs_rows {acs_rows}"
        )));
    }
    let acs_start = height / 2 - acs_rows / 2;
    let acs: Vec<usize> = (acs_start..acs_start + acs_rows).collect();
    let candidates: Vec<usize> = (0..height).filter(|r| !acs.contains(r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = rand::seq::index::sample(&mut rng, candidates.len(), budget - acs_rows);
    let mut kept_rows: Vec<usize> = acs
        .into_iter()
        .chain(extra.into_iter().map(|i| candidates[i]))
        .collect();
    kept_rows.sort_unstable();
    Ok(SamplingMask {
        height,
        width,
        acceleration,
        acs_rows,
        seed,
        kept_rows,
    })
}
