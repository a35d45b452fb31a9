//! Complex linear algebra and seeded sampling shared by every other module.

mod complex;
mod linalg;
mod rng;

pub use complex::{ComplexMatrix, ComplexVector, C64};
pub use linalg::{dft_matrix, hermitian_solve, least_squares};
pub use rng::{sample_complex_gaussian, Rng};
