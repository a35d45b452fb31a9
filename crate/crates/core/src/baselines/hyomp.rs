//! Two-stage hybrid-field orthogonal matching pursuit.
//!
//! Stage one greedily selects far-field atoms from a uniform `sin θ` grid,
//! stage two continues from the stage-one residual on a polar (angle ×
//! distance) near-field grid. Every iteration refits all selected atoms
//! jointly by least squares, so the final coefficients are a joint fit over
//! both stages.

use crate::channel::{steer_far, steer_near, ArrayConfig};
use crate::error::{bail, Result};
use crate::numerics::{least_squares, ComplexMatrix, ComplexVector};

#[derive(Debug, Clone, PartialEq)]
pub struct HyOmpConfig {
    pub far_grid: usize,
    pub near_angle_grid: usize,
    pub near_distances: Vec<f64>,
    pub sparsity_far: usize,
    pub sparsity_near: usize,
    /// Stop a stage early once `‖residual‖²` falls to this value.
    pub stop_residual: Option<f64>,
}

impl HyOmpConfig {
    /// `M`-point angle grids, 8 log-spaced distances over `r_range` and
    /// sparsity equal to the true path mix.
    pub fn default_for(array: &ArrayConfig, r_range: (f64, f64), paths: usize, far_paths: usize) -> Self {
        let m = array.antennas();
        Self {
            far_grid: m,
            near_angle_grid: m,
            near_distances: log_spaced(r_range.0, r_range.1, 8),
            sparsity_far: far_paths,
            sparsity_near: paths.saturating_sub(far_paths),
            stop_residual: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let near_atoms = self.near_angle_grid * self.near_distances.len();
        if self.far_grid + near_atoms == 0 {
            bail!(InvalidArgument, "both dictionaries are empty");
        }
        if self.near_distances.iter().any(|&r| !(r > 0.0)) || self.near_distances.windows(2).any(|w| w[1] <= w[0]) {
            bail!(InvalidArgument, "near-field distances must be positive and strictly increasing");
        }
        if self.sparsity_far + self.sparsity_near == 0 {
            bail!(InvalidArgument, "total sparsity must be at least 1");
        }
        Ok(())
    }
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 || lo == hi {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Atom {
    Far { theta: f64 },
    Near { theta: f64, distance: f64 },
}

#[derive(Debug, Clone)]
pub struct HybridDictionaries {
    pub far: ComplexMatrix,
    pub near: ComplexMatrix,
    /// Far columns first, then near columns.
    pub atoms: Vec<Atom>,
}

fn grid_angle(k: usize, n: usize) -> f64 {
    (-1.0 + 2.0 * k as f64 / n as f64).asin()
}

pub fn build_hybrid_dictionaries(array: &ArrayConfig, cfg: &HyOmpConfig) -> Result<HybridDictionaries> {
    cfg.validate()?;
    let m = array.antennas();
    let mut atoms = Vec::new();
    let mut far_cols = Vec::with_capacity(cfg.far_grid);
    for k in 0..cfg.far_grid {
        let theta = grid_angle(k, cfg.far_grid);
        far_cols.push(steer_far(array, theta)?);
        atoms.push(Atom::Far { theta });
    }
    let mut near_cols = Vec::new();
    for k in 0..cfg.near_angle_grid {
        let theta = grid_angle(k, cfg.near_angle_grid);
        for &distance in &cfg.near_distances {
            near_cols.push(steer_near(array, theta, distance)?);
            atoms.push(Atom::Near { theta, distance });
        }
    }
    let stack = |cols: &[ComplexVector]| if cols.is_empty() { Ok(ComplexMatrix::zeros(m, 0)) } else { ComplexMatrix::from_columns(cols) };
    Ok(HybridDictionaries { far: stack(&far_cols)?, near: stack(&near_cols)?, atoms })
}

/// Column index of the largest `|dᴴ·r|`; lowest index wins ties.
fn best_atom(dict: &ComplexMatrix, residual: &ComplexVector, taken: &[usize]) -> Result<Option<usize>> {
    let corr = dict.adjoint_mul_vec(residual)?;
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in corr.iter().enumerate() {
        if taken.contains(&j) {
            continue;
        }
        let v = c.norm();
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    Ok(best.map(|(j, _)| j))
}

/// Output of [`hyomp_trace`]: the estimate plus per-iteration bookkeeping.
#[derive(Debug, Clone)]
pub struct OmpTrace {
    pub estimate: ComplexVector,
    /// Selected atoms as indices into [`HybridDictionaries::atoms`].
    pub support: Vec<usize>,
    /// `‖residual‖` before the first and after every iteration.
    pub residual_norms: Vec<f64>,
}

pub fn hyomp_estimate(h_ls: &ComplexVector, dicts: &HybridDictionaries, cfg: &HyOmpConfig) -> Result<ComplexVector> {
    Ok(hyomp_trace(h_ls, dicts, cfg)?.estimate)
}

pub fn hyomp_trace(h_ls: &ComplexVector, dicts: &HybridDictionaries, cfg: &HyOmpConfig) -> Result<OmpTrace> {
    cfg.validate()?;
    if h_ls.len() != dicts.far.rows() || h_ls.len() != dicts.near.rows() {
        bail!(InvalidArgument, "observation length {} does not match dictionary rows {}", h_ls.len(), dicts.far.rows());
    }
    let n_far = dicts.far.cols();
    let mut columns: Vec<ComplexVector> = Vec::new();
    let mut support = Vec::new();
    let mut coeffs = ComplexVector::zeros(1);
    let mut residual = h_ls.clone();
    let mut norms = vec![residual.norm()];

    let stages = [(&dicts.far, cfg.sparsity_far, 0usize), (&dicts.near, cfg.sparsity_near, n_far)];
    for (dict, sparsity, offset) in stages {
        let mut taken: Vec<usize> = Vec::new();
        for _ in 0..sparsity.min(dict.cols()) {
            if cfg.stop_residual.is_some_and(|t| residual.norm_sqr() <= t) {
                break;
            }
            let Some(j) = best_atom(dict, &residual, &taken)? else { break };
            taken.push(j);
            support.push(offset + j);
            columns.push(dict.column(j));
            let a = ComplexMatrix::from_columns(&columns)?;
            coeffs = least_squares(&a, h_ls)?;
            let fit = a.mul_vec(&coeffs)?;
            residual = h_ls.sub(&fit)?;
            norms.push(residual.norm());
        }
    }

    let estimate = if columns.is_empty() {
        ComplexVector::zeros(h_ls.len())
    } else {
        let mut est = ComplexVector::zeros(h_ls.len());
        for (c, col) in coeffs.iter().zip(&columns) {
            est.axpy(*c, col)?;
        }
        est
    };
    Ok(OmpTrace { estimate, support, residual_norms: norms })
}
