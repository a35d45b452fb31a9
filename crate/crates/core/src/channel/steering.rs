use std::f64::consts::{FRAC_PI_2, PI};

use super::array::ArrayConfig;
use crate::error::{bail, Result};
use crate::numerics::{ComplexVector, C64};

fn check_angle(theta: f64) -> Result<()> {
    if !(-FRAC_PI_2..=FRAC_PI_2).contains(&theta) {
        bail!(InvalidArgument, "angle {} outside [-pi/2, pi/2]", theta);
    }
    Ok(())
}

/// Planar-wave array response: entry `m` (0-based) is
/// `exp(−j·2π·(d/λ)·m·sin θ)/√M`.
pub fn steer_far(array: &ArrayConfig, theta: f64) -> Result<ComplexVector> {
    check_angle(theta)?;
    let m = array.antennas();
    let norm = 1.0 / (m as f64).sqrt();
    let step = 2.0 * PI * array.spacing() / array.wavelength() * theta.sin();
    ComplexVector::new((0..m).map(|i| C64::from_polar(norm, -step * i as f64)).collect())
}

/// Spherical-wave array response for a scatterer at angle `θ` and distance
/// `r` from the array centre.
///
/// Element `m` sits at offset `δ_m·d` from the centre and sees the scatterer
/// at `ρ_m = √(r² + δ_m²d² + 2rδ_m d sin θ)`; the entry is
/// `exp(−j·(2π/λ)·(ρ_m − ρ_1))/√M`. Angle orientation and phase reference
/// (the first element) match [`steer_far`], so `steer_near → steer_far`
/// entry-wise as `r → ∞`.
pub fn steer_near(array: &ArrayConfig, theta: f64, r: f64) -> Result<ComplexVector> {
    check_angle(theta)?;
    if !(r > 0.0) || !r.is_finite() {
        bail!(InvalidArgument, "distance must be positive, got {}", r);
    }
    let m = array.antennas();
    let d = array.spacing();
    let k = 2.0 * PI / array.wavelength();
    let s = theta.sin();
    let dist = |i: usize| {
        let x = array.delta(i) * d;
        (r * r + x * x + 2.0 * r * x * s).sqrt()
    };
    let rho1 = dist(1);
    let norm = 1.0 / (m as f64).sqrt();
    ComplexVector::new((1..=m).map(|i| C64::from_polar(norm, -k * (dist(i) - rho1))).collect())
}
