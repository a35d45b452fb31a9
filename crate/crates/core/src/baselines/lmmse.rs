use crate::error::{bail, Result};
use crate::numerics::{hermitian_solve, ComplexMatrix, ComplexVector, C64};

/// Wiener filter built on a sample channel covariance.
#[derive(Debug, Clone)]
pub struct LmmseModel {
    pub covariance: ComplexMatrix,
}

impl LmmseModel {
    pub fn antennas(&self) -> usize {
        self.covariance.rows()
    }

    /// `W = R·(R + I/snr)⁻¹`, computed as `((R + I/snr)⁻¹·R)ᴴ`.
    pub fn filter(&self, snr_linear: f64) -> Result<ComplexMatrix> {
        if !(snr_linear > 0.0) {
            bail!(InvalidArgument, "SNR must be positive, got {}", snr_linear);
        }
        let r = &self.covariance;
        let mut a = r.clone();
        for i in 0..r.rows() {
            a[(i, i)] += C64::new(1.0 / snr_linear, 0.0);
        }
        Ok(hermitian_solve(&a, r)?.adjoint())
    }
}

/// Sample covariance `(1/N)·Σ h·hᴴ`, Hermitian-symmetrised, with a
/// `1e-9·trace/M` diagonal jitter.
pub fn fit_lmmse(channels: &[ComplexVector]) -> Result<LmmseModel> {
    if channels.len() < 2 {
        bail!(InvalidArgument, "need at least 2 channels, got {}", channels.len());
    }
    let m = channels[0].len();
    let mut r = ComplexMatrix::zeros(m, m);
    for h in channels {
        if h.len() != m {
            bail!(InvalidArgument, "channel lengths differ: {} vs {}", h.len(), m);
        }
        for i in 0..m {
            let hi = h[i];
            for j in 0..m {
                r[(i, j)] += hi * h[j].conj();
            }
        }
    }
    let r = r.scale(1.0 / channels.len() as f64);
    let mut sym = r.add(&r.adjoint())?.scale(0.5);
    let jitter = 1e-9 * sym.trace().re / m as f64;
    for i in 0..m {
        sym[(i, i)] += C64::new(jitter, 0.0);
    }
    Ok(LmmseModel { covariance: sym })
}

pub fn lmmse_estimate(model: &LmmseModel, h_ls: &ComplexVector, snr_linear: f64) -> Result<ComplexVector> {
    if h_ls.len() != model.antennas() {
        bail!(InvalidArgument, "observation length {} does not match model size {}", h_ls.len(), model.antennas());
    }
    if !(snr_linear > 0.0) {
        bail!(InvalidArgument, "SNR must be positive, got {}", snr_linear);
    }
    // W·y = R·(R + I/snr)⁻¹·y, one Cholesky solve instead of forming W
    let r = &model.covariance;
    let mut a = r.clone();
    for i in 0..r.rows() {
        a[(i, i)] += C64::new(1.0 / snr_linear, 0.0);
    }
    let x = hermitian_solve(&a, &ComplexMatrix::column_vector(h_ls))?;
    r.mul_vec(&x.column(0))
}
