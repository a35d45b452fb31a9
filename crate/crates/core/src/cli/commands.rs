use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::atomic_write;
use super::config::{split_seed, ExperimentConfig, Split, SweepMode};
use crate::baselines::{build_hybrid_dictionaries, fit_lmmse, hyomp_estimate, lmmse_estimate, nmse, HybridDictionaries, LmmseModel};
use crate::channel::{self, db_to_linear, make_dataset, observe_ls, sample_channel, ChannelSample, Dataset, SnrPolicy};
use crate::error::{bail, Result, XceError};
use crate::model::{forward_batch, freeze_partition, load_weights, save_weights, ModelParams};
use crate::numerics::{ComplexMatrix, ComplexVector, Rng};
use crate::training::{train, NmseReport, TrainLog};

/// Header of every result CSV.
pub const RESULT_HEADER: [&str; 8] = ["estimator", "snr_db", "L", "L0", "n_samples", "nmse_linear", "nmse_db", "config_hash"];

const MODEL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Ls,
    Lmmse,
    HyOmp,
    Llm4xce,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Ls, Estimator::Lmmse, Estimator::HyOmp, Estimator::Llm4xce];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ls => "ls",
            Estimator::Lmmse => "lmmse",
            Estimator::HyOmp => "hyomp",
            Estimator::Llm4xce => "llm4xce",
        }
    }

    /// Parses a comma-separated list; duplicates are dropped, order kept.
    pub fn parse_list(s: &str) -> Result<Vec<Estimator>> {
        let mut out = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let e: Estimator = tok.parse()?;
            if !out.contains(&e) {
                out.push(e);
            }
        }
        if out.is_empty() {
            bail!(InvalidArgument, "estimator list is empty; valid names: {}", valid_names());
        }
        Ok(out)
    }
}

fn valid_names() -> String {
    Estimator::ALL.map(Estimator::name).join(", ")
}

impl FromStr for Estimator {
    type Err = XceError;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| XceError::InvalidArgument(format!("unknown estimator '{}'; valid names: {}", s, valid_names())))
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub estimator: Estimator,
    /// `None` when the evaluated samples do not share one SNR.
    pub snr_db: Option<f64>,
    pub paths: usize,
    pub far_paths: usize,
    pub n_samples: usize,
    pub nmse_linear: f64,
    pub nmse_db: f64,
}

impl SweepRow {
    fn new(estimator: Estimator, snr_db: Option<f64>, paths: usize, far_paths: usize, report: &NmseReport) -> Self {
        Self {
            estimator,
            snr_db,
            paths,
            far_paths,
            n_samples: report.per_sample.len(),
            nmse_linear: report.mean_linear,
            nmse_db: report.mean_db,
        }
    }
}

pub fn write_results<W: Write>(rows: &[SweepRow], config_hash: &str, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULT_HEADER).map_err(csv_err)?;
    for r in rows {
        let snr = r.snr_db.map(|s| s.to_string()).unwrap_or_default();
        out.write_record([
            r.estimator.name().to_string(),
            snr,
            r.paths.to_string(),
            r.far_paths.to_string(),
            r.n_samples.to_string(),
            r.nmse_linear.to_string(),
            r.nmse_db.to_string(),
            config_hash.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> XceError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => XceError::Io(e),
        other => XceError::Format(format!("{other:?}")),
    }
}

/// `<path>.<suffix>`, e.g. `out.csv` → `out.csv.config.toml`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes the resolved configuration next to an artifact.
pub fn write_config_echo(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    atomic_write(path, |mut f| {
        f.write_all(cfg.to_toml().as_bytes())?;
        Ok(())
    })
}

/// Result CSV plus its config echo; `None` prints the CSV to stdout.
pub fn emit_results(rows: &[SweepRow], cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let hash = cfg.hash();
    match out {
        Some(p) => {
            atomic_write(p, |f| write_results(rows, &hash, io::BufWriter::new(f)))?;
            write_config_echo(cfg, &sidecar(p, "config.toml"))
        }
        None => write_results(rows, &hash, io::stdout().lock()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub path: PathBuf,
    pub n_samples: usize,
    pub base_seed: u64,
}

/// Generates the train, validation and test files into `out_dir` together
/// with `config.toml`. Everything is validated before the first write.
pub fn cmd_gen(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<GenSummary>> {
    cfg.validate()?;
    let specs = [Split::Train, Split::Val, Split::Test].map(|s| cfg.dataset_spec(s).map(|d| (s, d)));
    let specs = specs.into_iter().collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir)?;
    let mut out = Vec::new();
    for (split, spec) in specs {
        let path = out_dir.join(split.file_name());
        let ds = make_dataset(&spec)?;
        channel::xced::save(&ds, &path)?;
        out.push(GenSummary { path, n_samples: spec.n_samples, base_seed: spec.base_seed });
    }
    write_config_echo(cfg, &out_dir.join("config.toml"))?;
    Ok(out)
}

/// A dataset argument is either a file or a directory holding `split`.
pub fn dataset_path(path: &Path, split: Split) -> PathBuf {
    if path.is_dir() {
        path.join(split.file_name())
    } else {
        path.to_path_buf()
    }
}

fn load_checked(cfg: &ExperimentConfig, path: &Path) -> Result<Dataset> {
    let ds = channel::xced::load(path).map_err(|e| match e {
        XceError::Io(io) => XceError::Io(io::Error::new(io.kind(), format!("{}: {}", path.display(), io))),
        other => other,
    })?;
    let m = ds.spec.array.antennas();
    if m != cfg.array.m {
        bail!(Config, "dataset {} has M = {} but the config has M = {}", path.display(), m, cfg.array.m);
    }
    if ds.samples.is_empty() {
        bail!(InvalidArgument, "dataset {} is empty", path.display());
    }
    Ok(ds)
}

/// Copies everything written to both sinks.
struct Tee<'a> {
    buf: Vec<u8>,
    echo: &'a mut dyn Write,
}

impl Write for Tee<'_> {
    fn write(&mut self, b: &[u8]) -> io::Result<usize> {
        self.buf.extend_from_slice(b);
        self.echo.write_all(b)?;
        Ok(b.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.echo.flush()
    }
}

/// Trains on `train.xced`/`val.xced` under `dataset_dir`, writes the best
/// checkpoint to `weights_out`, the epoch log to `<weights_out>.log.csv`
/// and the config echo to `<weights_out>.config.toml`.
pub fn cmd_train(cfg: &ExperimentConfig, dataset_dir: &Path, weights_out: &Path, progress: &mut dyn Write) -> Result<TrainLog> {
    cfg.validate()?;
    let train_set = load_checked(cfg, &dataset_path(dataset_dir, Split::Train))?;
    let val_set = load_checked(cfg, &dataset_dir.join(Split::Val.file_name()))?;
    let mut params = ModelParams::init(&cfg.model_config(), cfg.init_seed())?;
    freeze_partition(&mut params);
    let mut tee = Tee { buf: Vec::new(), echo: progress };
    let log = train(&mut params, &train_set.samples, &val_set.samples, &cfg.train, &mut tee, Some(&cfg.hash()))?;
    save_weights(&params, weights_out)?;
    let text = tee.buf;
    atomic_write(&sidecar(weights_out, "log.csv"), |mut f| {
        f.write_all(&text)?;
        Ok(())
    })?;
    write_config_echo(cfg, &sidecar(weights_out, "config.toml"))?;
    Ok(log)
}

/// Shared state for scoring estimators on sample sets.
pub struct Evaluator {
    cfg: ExperimentConfig,
    lmmse: Option<LmmseModel>,
    dicts: Option<HybridDictionaries>,
    model: Option<ModelParams>,
}

impl Evaluator {
    /// Prepares what `estimators` need: the LMMSE covariance from fresh
    /// training-mix channels, the HY-OMP dictionaries and the model weights.
    pub fn new(cfg: &ExperimentConfig, estimators: &[Estimator], weights: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if estimators.is_empty() {
            bail!(InvalidArgument, "estimator list is empty; valid names: {}", valid_names());
        }
        let lmmse = if estimators.contains(&Estimator::Lmmse) {
            let mut spec = cfg.dataset_spec(Split::Train)?;
            spec.base_seed = split_seed(cfg.dataset.seed, 3);
            let n = cfg.eval.lmmse_samples.max(2);
            let hs = (0..n)
                .into_par_iter()
                .map(|i| sample_channel(&spec, spec.base_seed.wrapping_add(i as u64)).map(|(h, _, _)| h))
                .collect::<Result<Vec<_>>>()?;
            Some(fit_lmmse(&hs)?)
        } else {
            None
        };
        let dicts = if estimators.contains(&Estimator::HyOmp) {
            let c = cfg.hyomp_config(cfg.dataset.paths, cfg.dataset.far_paths)?;
            Some(build_hybrid_dictionaries(&cfg.array_config()?, &c)?)
        } else {
            None
        };
        let model = if estimators.contains(&Estimator::Llm4xce) {
            let Some(w) = weights else {
                bail!(InvalidArgument, "estimator llm4xce needs --weights");
            };
            Some(load_weights(w, &cfg.model_config())?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), lmmse, dicts, model })
    }

    pub fn model(&self) -> Option<&ModelParams> {
        self.model.as_ref()
    }

    /// Estimates for every sample; HY-OMP uses the true `(L0, L − L0)`.
    pub fn estimate(&self, est: Estimator, samples: &[ChannelSample], paths: usize, far_paths: usize) -> Result<Vec<ComplexVector>> {
        match est {
            Estimator::Ls => Ok(samples.iter().map(|s| s.h_ls.clone()).collect()),
            Estimator::Lmmse => {
                let model = self.lmmse.as_ref().ok_or_else(|| missing(est))?;
                lmmse_batch(model, samples)
            }
            Estimator::HyOmp => {
                let dicts = self.dicts.as_ref().ok_or_else(|| missing(est))?;
                let c = self.cfg.hyomp_config(paths, far_paths)?;
                samples.par_iter().map(|s| hyomp_estimate(&s.h_ls, dicts, &c)).collect()
            }
            Estimator::Llm4xce => {
                let params = self.model.as_ref().ok_or_else(|| missing(est))?;
                let chunks = samples
                    .par_chunks(MODEL_CHUNK)
                    .map(|c| forward_batch(&c.iter().map(|s| s.h_ls.clone()).collect::<Vec<_>>(), params))
                    .collect::<Result<Vec<_>>>()?;
                Ok(chunks.into_iter().flatten().collect())
            }
        }
    }

    pub fn score(&self, est: Estimator, samples: &[ChannelSample], paths: usize, far_paths: usize) -> Result<NmseReport> {
        let hats = self.estimate(est, samples, paths, far_paths)?;
        let per = samples.par_iter().zip(&hats).map(|(s, h)| nmse(&s.h_true, h)).collect::<Result<Vec<_>>>()?;
        NmseReport::from_samples(per)
    }
}

fn missing(est: Estimator) -> XceError {
    XceError::Contract(format!("evaluator was not prepared for {est}"))
}

/// Groups samples by SNR; shared SNRs reuse one filter matrix.
fn lmmse_batch(model: &LmmseModel, samples: &[ChannelSample]) -> Result<Vec<ComplexVector>> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for s in samples {
        *counts.entry(s.snr_linear.to_bits()).or_default() += 1;
    }
    let shared: Vec<u64> = counts.iter().filter(|(_, &n)| n >= 4).map(|(&k, _)| k).collect();
    let filters: HashMap<u64, ComplexMatrix> =
        shared.par_iter().map(|&k| model.filter(f64::from_bits(k)).map(|w| (k, w))).collect::<Result<_>>()?;
    samples
        .par_iter()
        .map(|s| match filters.get(&s.snr_linear.to_bits()) {
            Some(w) => w.mul_vec(&s.h_ls),
            None => lmmse_estimate(model, &s.h_ls, s.snr_linear),
        })
        .collect()
}

/// The common SNR of a sample set, if there is one.
fn common_snr_db(samples: &[ChannelSample]) -> Option<f64> {
    let first = samples.first()?.snr_linear;
    samples.iter().all(|s| s.snr_linear == first).then(|| channel::linear_to_db(first))
}

/// One row per estimator on a stored test set, each sample at its own SNR.
pub fn cmd_eval(cfg: &ExperimentConfig, weights: Option<&Path>, dataset: &Path, estimators: &[Estimator]) -> Result<Vec<SweepRow>> {
    let ev = Evaluator::new(cfg, estimators, weights)?;
    let ds = load_checked(cfg, &dataset_path(dataset, Split::Test))?;
    let snr_db = match ds.spec.snr {
        SnrPolicy::Fixed { db } => Some(db),
        SnrPolicy::UniformDb { .. } => common_snr_db(&ds.samples),
    };
    let (l, l0) = (ds.spec.paths, ds.spec.far_paths);
    estimators
        .iter()
        .map(|&e| Ok(SweepRow::new(e, snr_db, l, l0, &ev.score(e, &ds.samples, l, l0)?)))
        .collect()
}

/// The `(L, L0)` scenarios of the SNR sweep.
pub fn snr_sweep_scenarios(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &l in &cfg.eval.snr_sweep_paths {
        let mixes = match cfg.eval.snr_sweep_mode {
            SweepMode::Pure => [l, 0],
            SweepMode::Hybrid => [l - 1, 1.min(l)],
        };
        for l0 in mixes {
            if !out.contains(&(l, l0)) {
                out.push((l, l0));
            }
        }
    }
    out
}

fn scenario_spec(cfg: &ExperimentConfig, paths: usize, far_paths: usize, snr: SnrPolicy, k: u64) -> Result<channel::DatasetSpec> {
    let mut spec = cfg.dataset_spec(Split::Test)?;
    spec.paths = paths;
    spec.far_paths = far_paths;
    spec.snr = snr;
    spec.n_samples = cfg.eval.samples_per_point;
    spec.base_seed = split_seed(cfg.eval.seed, k);
    spec.validate()?;
    Ok(spec)
}

/// Every scenario keeps one set of channels; each grid SNR draws fresh
/// noise for them.
pub fn cmd_sweep_snr(cfg: &ExperimentConfig, weights: Option<&Path>, estimators: &[Estimator]) -> Result<Vec<SweepRow>> {
    let ev = Evaluator::new(cfg, estimators, weights)?;
    let mut rows = Vec::new();
    for (s, (l, l0)) in snr_sweep_scenarios(cfg).into_iter().enumerate() {
        let spec = scenario_spec(cfg, l, l0, cfg.dataset.test_snr, 4 + s as u64)?;
        let channels = (0..spec.n_samples)
            .into_par_iter()
            .map(|i| {
                let seed = spec.base_seed.wrapping_add(i as u64);
                sample_channel(&spec, seed).map(|(h, _, _)| (seed, h))
            })
            .collect::<Result<Vec<_>>>()?;
        for (j, &snr_db) in cfg.eval.snr_grid_db.iter().enumerate() {
            let snr = db_to_linear(snr_db);
            let samples = channels
                .par_iter()
                .map(|(seed, h)| {
                    let mut rng = Rng::new(noise_seed(*seed, j));
                    Ok(ChannelSample { h_true: h.clone(), h_ls: observe_ls(h, snr, &mut rng)?, snr_linear: snr, paths: Vec::new(), seed: *seed })
                })
                .collect::<Result<Vec<_>>>()?;
            for &e in estimators {
                rows.push(SweepRow::new(e, Some(snr_db), l, l0, &ev.score(e, &samples, l, l0)?));
            }
        }
    }
    Ok(rows)
}

fn noise_seed(channel_seed: u64, snr_index: usize) -> u64 {
    channel_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(snr_index as u64 + 1)
}

/// Fresh channels at every `L0` of the grid, all at the path-sweep SNR.
pub fn cmd_sweep_paths(cfg: &ExperimentConfig, weights: Option<&Path>, estimators: &[Estimator]) -> Result<Vec<SweepRow>> {
    let ev = Evaluator::new(cfg, estimators, weights)?;
    let l = cfg.dataset.paths;
    let snr_db = cfg.eval.path_sweep_snr_db;
    let mut rows = Vec::new();
    for l0 in cfg.l0_grid() {
        let spec = scenario_spec(cfg, l, l0, SnrPolicy::Fixed { db: snr_db }, 64 + l0 as u64)?;
        let ds = make_dataset(&spec)?;
        for &e in estimators {
            rows.push(SweepRow::new(e, Some(snr_db), l, l0, &ev.score(e, &ds.samples, l, l0)?));
        }
    }
    Ok(rows)
}

/// Estimators a sweep runs when none are named: all of them, minus the
/// model when no weights were given.
pub fn default_estimators(has_weights: bool) -> Vec<Estimator> {
    Estimator::ALL.into_iter().filter(|&e| has_weights || e != Estimator::Llm4xce).collect()
}
