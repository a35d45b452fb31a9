//! MSE training with Adam and step learning-rate decay, plus NMSE
//! evaluation.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::baselines::nmse;
use crate::channel::{linear_to_db, ChannelSample};
use crate::error::{bail, Result, XceError};
use crate::model::{forward_batch, forward_graph, to_grid, ModelParams};
use crate::numerics::{ComplexVector, Rng};

/// Lowest reported NMSE in dB; a perfect estimate maps here instead of −∞.
pub const NMSE_DB_FLOOR: f64 = -300.0;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, epochs: 200, lr0: 1e-3, decay_factor: 0.1, decay_every: 50, betas: (0.9, 0.999), eps_adam: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_every == 0 {
            bail!(Config, "batch_size and decay_every must be positive");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            bail!(Config, "lr0 must be a finite non-negative number, got {}", self.lr0);
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            bail!(Config, "decay_factor must lie in (0, 1], got {}", self.decay_factor);
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            bail!(Config, "Adam betas must lie in [0, 1), got ({}, {})", b1, b2);
        }
        if !(self.eps_adam > 0.0) {
            bail!(Config, "eps_adam must be positive");
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// `(1/N) Σ_j ‖H_j − Ĥ_j‖²_F` over the leading batch axis.
pub fn mse_loss(g: &mut Graph, h_true: Var, h_hat: Var) -> Result<Var> {
    if g.shape(h_true) != g.shape(h_hat) {
        bail!(Shape, "loss operands differ: {:?} vs {:?}", g.shape(h_true), g.shape(h_hat));
    }
    let n = g.shape(h_true)[0];
    let d = g.sub(h_hat, h_true)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Adam moments for the trainable parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        let moments = params.params().iter().map(|p| p.trainable.then(|| (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()]))).collect();
        Self { t: 0, beta1: cfg.betas.0, beta2: cfg.betas.1, eps: cfg.eps_adam, moments }
    }

    /// First and second moments of parameter `i`, if it is trainable.
    pub fn moments(&self, i: usize) -> Option<(&[f64], &[f64])> {
        self.moments.get(i)?.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every trainable parameter; gradients
/// are cleared afterwards.
pub fn adam_step(params: &mut ModelParams, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    if opt.moments.len() != params.len() {
        bail!(Contract, "optimizer state holds {} slots for {} parameters", opt.moments.len(), params.len());
    }
    for (p, slot) in params.params().iter().zip(&opt.moments) {
        if p.trainable && (slot.is_none() || p.grad.is_none()) {
            bail!(Contract, "trainable parameter {} has no gradient or optimizer state", p.name);
        }
    }
    opt.t += 1;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let c1 = 1.0 - b1.powi(opt.t as i32);
    let c2 = 1.0 - b2.powi(opt.t as i32);
    for (p, slot) in params.params_mut().iter_mut().zip(opt.moments.iter_mut()) {
        let grad = p.grad.take();
        if !p.trainable {
            continue;
        }
        let (grad, (m, v)) = (grad.expect("checked"), slot.as_mut().expect("checked"));
        for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Forward, loss and backward on one batch; stores gradients on the
/// trainable parameters and returns the loss.
pub fn compute_gradients(params: &mut ModelParams, batch: &[&ChannelSample]) -> Result<f64> {
    let side = params.config().grid_side().ok_or_else(|| XceError::Config("M is not a perfect square".into()))?;
    let ls: Vec<ComplexVector> = batch.iter().map(|s| s.h_ls.clone()).collect();
    let truth: Vec<ComplexVector> = batch.iter().map(|s| s.h_true.clone()).collect();
    let mut g = Graph::new();
    let (loss, grads) = {
        let b = params.bind(&mut g, true);
        let x = g.constant(to_grid(&ls, side)?);
        let t = g.constant(to_grid(&truth, side)?);
        let y = forward_graph(&mut g, &b, x)?;
        let loss = mse_loss(&mut g, t, y)?;
        g.backward(loss)?;
        let grads: Vec<Option<Tensor>> = b.vars().iter().map(|&v| g.grad(v)).collect();
        (g.value(loss).item(), grads)
    };
    for (p, gr) in params.params_mut().iter_mut().zip(grads) {
        p.grad = if p.trainable { gr } else { None };
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_nmse_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_nmse_db: f64,
}

pub const LOG_HEADER: [&str; 4] = ["epoch", "lr", "train_loss", "val_nmse_db"];

/// Trains in place and leaves `params` at the epoch with the lowest
/// validation NMSE. Per-epoch rows are written to `log` as CSV, with a
/// trailing `config_hash` column when `config_hash` is given.
pub fn train(
    params: &mut ModelParams,
    train_set: &[ChannelSample],
    val_set: &[ChannelSample],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    config_hash: Option<&str>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        bail!(InvalidArgument, "training and validation sets must be non-empty");
    }
    let mut csv = csv::Writer::from_writer(log);
    let mut header: Vec<&str> = LOG_HEADER.to_vec();
    header.extend(config_hash.map(|_| "config_hash"));
    csv.write_record(&header).map_err(csv_err)?;
    csv.flush()?;

    let mut opt = OptimizerState::new(params, cfg);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(cfg.seed.wrapping_add(epoch as u64)).shuffle(&mut order);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ChannelSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let loss = compute_gradients(params, &batch)?;
            if !loss.is_finite() {
                return Err(XceError::NonFinite { epoch, batch: bi, value: loss });
            }
            total += loss * batch.len() as f64;
            adam_step(params, &mut opt, lr)?;
        }
        let val = evaluate_nmse(params, val_set)?;
        let rec = EpochRecord { epoch, lr, train_loss: total / train_set.len() as f64, val_nmse_db: val.mean_db };
        let mut row = vec![rec.epoch.to_string(), rec.lr.to_string(), rec.train_loss.to_string(), rec.val_nmse_db.to_string()];
        row.extend(config_hash.map(str::to_string));
        csv.write_record(&row).map_err(csv_err)?;
        csv.flush()?;
        if best.as_ref().is_none_or(|(b, _, _)| val.mean_linear < *b) {
            best = Some((val.mean_linear, epoch, params.params().iter().map(|p| p.tensor.clone()).collect()));
        }
        records.push(rec);
    }
    let (best_epoch, best_db) = match best {
        Some((lin, epoch, snapshot)) => {
            for (p, t) in params.params_mut().iter_mut().zip(snapshot) {
                p.tensor = t;
            }
            (epoch, to_db(lin))
        }
        None => (0, evaluate_nmse(params, val_set)?.mean_db),
    };
    Ok(TrainLog { epochs: records, best_epoch, best_val_nmse_db: best_db })
}

fn csv_err(e: csv::Error) -> XceError {
    XceError::Io(std::io::Error::other(e))
}

/// NMSE summary over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct NmseReport {
    /// Mean of the per-sample linear NMSE.
    pub mean_linear: f64,
    /// `10·log10(mean_linear)`, floored at [`NMSE_DB_FLOOR`].
    pub mean_db: f64,
    pub per_sample: Vec<f64>,
}

fn to_db(x: f64) -> f64 {
    if x > 0.0 {
        linear_to_db(x).max(NMSE_DB_FLOOR)
    } else {
        NMSE_DB_FLOOR
    }
}

impl NmseReport {
    pub fn from_samples(per_sample: Vec<f64>) -> Result<Self> {
        if per_sample.is_empty() {
            bail!(InvalidArgument, "no samples to average");
        }
        let mean_linear = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        Ok(Self { mean_linear, mean_db: to_db(mean_linear), per_sample })
    }
}

/// Runs the model on every sample (batch-parallel) and averages NMSE in the
/// linear domain.
pub fn evaluate_nmse(params: &ModelParams, test: &[ChannelSample]) -> Result<NmseReport> {
    if test.is_empty() {
        bail!(InvalidArgument, "test set is empty");
    }
    let chunks: Vec<Vec<f64>> = test
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let ls: Vec<ComplexVector> = chunk.iter().map(|s| s.h_ls.clone()).collect();
            let est = forward_batch(&ls, params)?;
            chunk.iter().zip(&est).map(|(s, e)| nmse(&s.h_true, e)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    NmseReport::from_samples(chunks.into_iter().flatten().collect())
}
