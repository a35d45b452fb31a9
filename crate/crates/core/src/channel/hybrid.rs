use super::array::ArrayConfig;
use super::steering::{steer_far, steer_near};
use crate::error::{bail, Result};
use crate::numerics::{sample_complex_gaussian, ComplexVector, Rng, C64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathKind {
    FarField,
    NearField { distance: f64 },
}

/// One propagation path of a hybrid-field channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub kind: PathKind,
    pub theta: f64,
    pub gain: C64,
}

impl PathParams {
    pub fn far(theta: f64, gain: C64) -> Self {
        Self { kind: PathKind::FarField, theta, gain }
    }

    pub fn near(theta: f64, distance: f64, gain: C64) -> Self {
        Self { kind: PathKind::NearField { distance }, theta, gain }
    }

    pub fn is_far(&self) -> bool {
        matches!(self.kind, PathKind::FarField)
    }

    pub fn steering(&self, array: &ArrayConfig) -> Result<ComplexVector> {
        match self.kind {
            PathKind::FarField => steer_far(array, self.theta),
            PathKind::NearField { distance } => steer_near(array, self.theta, distance),
        }
    }
}

/// `√(M/L)·Σ g_l·a(θ_l[, r_l])` over far- and near-field paths.
pub fn gen_hybrid_channel(array: &ArrayConfig, paths: &[PathParams]) -> Result<ComplexVector> {
    if paths.is_empty() {
        bail!(InvalidArgument, "channel needs at least one path");
    }
    let scale = (array.antennas() as f64 / paths.len() as f64).sqrt();
    let mut h = ComplexVector::zeros(array.antennas());
    for p in paths {
        h.axpy(p.gain * scale, &p.steering(array)?)?;
    }
    Ok(h)
}

/// Rescales `h` so that `‖h‖² = M`.
pub fn normalize_power(h: &ComplexVector) -> Result<ComplexVector> {
    let norm = h.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        bail!(DegenerateChannel, "cannot normalise a channel with norm {}", norm);
    }
    Ok(h.scale((h.len() as f64).sqrt() / norm))
}

/// Least-squares pilot estimate `h + n/√P` with `n ~ CN(0, I)`.
pub fn observe_ls(h: &ComplexVector, snr_linear: f64, rng: &mut Rng) -> Result<ComplexVector> {
    if !(snr_linear > 0.0) || !snr_linear.is_finite() {
        bail!(InvalidArgument, "SNR must be positive and finite, got {}", snr_linear);
    }
    let noise = sample_complex_gaussian(rng, h.len(), 1.0)?;
    let mut out = h.clone();
    out.axpy(C64::new(1.0 / snr_linear.sqrt(), 0.0), &noise)?;
    Ok(out)
}
