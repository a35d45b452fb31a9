//! Experiment configuration, subcommands and result files.

mod commands;
mod config;

pub use commands::{
    cmd_eval, cmd_gen, cmd_sweep_paths, cmd_sweep_snr, cmd_train, dataset_path, default_estimators, emit_results, sidecar,
    snr_sweep_scenarios, write_config_echo, write_results, Estimator, Evaluator, GenSummary, SweepRow, RESULT_HEADER,
};
pub use config::{split_seed, ArraySection, DatasetSection, EvalSection, ExperimentConfig, ModelSection, Split, SweepMode};

use std::fs::{self, File};
use std::path::Path;

use crate::error::Result;

/// Writes through a temporary sibling file that is renamed over `path`.
pub fn atomic_write(path: &Path, write: impl FnOnce(File) -> Result<()>) -> Result<()> {
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let res = File::create(&tmp).map_err(Into::into).and_then(write);
    match res {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}
