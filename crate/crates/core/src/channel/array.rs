use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Uniform linear array with half-wavelength spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    m: usize,
    wavelength: f64,
}

impl ArrayConfig {
    pub fn new(m: usize, wavelength: f64) -> Result<Self> {
        if m == 0 {
            bail!(InvalidArgument, "antenna count must be positive");
        }
        if !(wavelength > 0.0) || !wavelength.is_finite() {
            bail!(InvalidArgument, "wavelength must be positive, got {}", wavelength);
        }
        Ok(Self { m, wavelength })
    }

    pub fn antennas(&self) -> usize {
        self.m
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// Element spacing, always `λ/2`.
    pub fn spacing(&self) -> f64 {
        self.wavelength / 2.0
    }

    /// Centred element offset `δ_m = (2m − M − 1)/2` for 1-based `m`.
    pub fn delta(&self, m: usize) -> f64 {
        (2.0 * m as f64 - self.m as f64 - 1.0) / 2.0
    }

    /// Side length of the square antenna grid, if `M` is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let s = (self.m as f64).sqrt().round() as usize;
        (s * s == self.m).then_some(s)
    }
}

/// Near/far boundary `2·D_a²/λ` with aperture `D_a = M·λ/2`, i.e. `M²λ/2`.
pub fn rayleigh_distance(array: &ArrayConfig) -> f64 {
    let m = array.m as f64;
    m * m * array.wavelength / 2.0
}
