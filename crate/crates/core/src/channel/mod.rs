//! Far-field, near-field and hybrid-field channel synthesis, noisy LS
//! observations and reproducible datasets.

mod array;
mod dataset;
mod hybrid;
mod steering;
pub mod xced;

pub use array::{rayleigh_distance, ArrayConfig};
pub use dataset::{make_dataset, sample_channel, ChannelSample, Dataset, DatasetSpec, SnrPolicy};
pub use hybrid::{gen_hybrid_channel, normalize_power, observe_ls, PathKind, PathParams};
pub use steering::{steer_far, steer_near};

/// Converts a power ratio in dB to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Converts a linear power ratio to dB.
pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}
