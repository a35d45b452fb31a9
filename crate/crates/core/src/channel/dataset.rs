use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::array::ArrayConfig;
use super::hybrid::{gen_hybrid_channel, normalize_power, observe_ls, PathParams};
use super::db_to_linear;
use crate::error::{bail, Result};
use crate::numerics::{ComplexVector, Rng};

/// How the per-sample SNR is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnrPolicy {
    Fixed { db: f64 },
    UniformDb { lo: f64, hi: f64 },
}

impl SnrPolicy {
    fn validate(&self) -> Result<()> {
        match *self {
            SnrPolicy::Fixed { db } if !db.is_finite() => bail!(InvalidArgument, "SNR {} dB is not finite", db),
            SnrPolicy::UniformDb { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                bail!(InvalidArgument, "SNR range [{}, {}] dB is invalid", lo, hi)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub array: ArrayConfig,
    /// Total path count `L`.
    pub paths: usize,
    /// Far-field path count `L0`.
    pub far_paths: usize,
    pub r_range: (f64, f64),
    pub snr: SnrPolicy,
    pub n_samples: usize,
    pub base_seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            bail!(InvalidArgument, "L must be at least 1");
        }
        if self.far_paths > self.paths {
            bail!(InvalidArgument, "L0 = {} exceeds L = {}", self.far_paths, self.paths);
        }
        let (lo, hi) = self.r_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            bail!(InvalidArgument, "distance range [{}, {}] is invalid", lo, hi);
        }
        self.snr.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// Power-normalised channel, `‖h‖² = M`.
    pub h_true: ComplexVector,
    pub h_ls: ComplexVector,
    pub snr_linear: f64,
    /// Path metadata; empty for samples read back from disk.
    pub paths: Vec<PathParams>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<ChannelSample>,
}

/// Draws the paths and normalised channel for one seed.
///
/// Stream order: for each far path `θ, g`, then for each near path `θ, r, g`.
/// The returned generator continues the same stream.
pub fn sample_channel(spec: &DatasetSpec, seed: u64) -> Result<(ComplexVector, Vec<PathParams>, Rng)> {
    let mut rng = Rng::new(seed);
    let mut paths = Vec::with_capacity(spec.paths);
    for l in 0..spec.paths {
        let theta = rng.uniform(-FRAC_PI_2, FRAC_PI_2);
        if l < spec.far_paths {
            let g = rng.complex_gaussian(1.0);
            paths.push(PathParams::far(theta, g));
        } else {
            let r = rng.uniform(spec.r_range.0, spec.r_range.1);
            let g = rng.complex_gaussian(1.0);
            paths.push(PathParams::near(theta, r, g));
        }
    }
    let h = normalize_power(&gen_hybrid_channel(&spec.array, &paths)?)?;
    Ok((h, paths, rng))
}

fn make_sample(spec: &DatasetSpec, seed: u64) -> Result<ChannelSample> {
    let (h_true, paths, mut rng) = sample_channel(spec, seed)?;
    let snr_db = match spec.snr {
        SnrPolicy::Fixed { db } => db,
        SnrPolicy::UniformDb { lo, hi } => rng.uniform(lo, hi),
    };
    let snr_linear = db_to_linear(snr_db);
    let h_ls = observe_ls(&h_true, snr_linear, &mut rng)?;
    Ok(ChannelSample { h_true, h_ls, snr_linear, paths, seed })
}

/// Generates `n_samples` samples; sample `i` depends only on `base_seed + i`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| make_sample(spec, spec.base_seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), samples })
}
