//! Classical channel estimators and the NMSE metric.

mod hyomp;
mod lmmse;

pub use hyomp::{build_hybrid_dictionaries, hyomp_estimate, hyomp_trace, Atom, HybridDictionaries, HyOmpConfig, OmpTrace};
pub use lmmse::{fit_lmmse, lmmse_estimate, LmmseModel};

use crate::error::{bail, Result};
use crate::numerics::ComplexVector;

/// Per-sample normalised squared error `‖h − ĥ‖² / ‖h‖²`.
pub fn nmse(h_true: &ComplexVector, h_hat: &ComplexVector) -> Result<f64> {
    if h_true.len() != h_hat.len() {
        bail!(InvalidArgument, "length mismatch: {} vs {}", h_true.len(), h_hat.len());
    }
    let p = h_true.norm_sqr();
    if !(p > 0.0) {
        bail!(InvalidArgument, "reference channel has zero power");
    }
    Ok(h_true.sub(h_hat)?.norm_sqr() / p)
}

/// The LS estimator is the observation itself.
pub fn ls_estimate(h_ls: &ComplexVector) -> ComplexVector {
    h_ls.clone()
}
