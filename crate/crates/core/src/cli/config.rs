use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::HyOmpConfig;
use crate::channel::{ArrayConfig, DatasetSpec, SnrPolicy};
use crate::error::{bail, Result, XceError};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySection {
    #[serde(rename = "M")]
    pub m: usize,
    pub lambda: f64,
}

impl Default for ArraySection {
    fn default() -> Self {
        Self { m: 256, lambda: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    #[serde(rename = "L")]
    pub paths: usize,
    #[serde(rename = "L0")]
    pub far_paths: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Per-sample SNR of the training and validation sets.
    pub snr: SnrPolicy,
    pub test_snr: SnrPolicy,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            paths: 6,
            far_paths: 1,
            r_min: 10.0,
            r_max: 80.0,
            snr: SnrPolicy::UniformDb { lo: -5.0, hi: 20.0 },
            test_snr: SnrPolicy::Fixed { db: 10.0 },
            n_train: 45_000,
            n_val: 5_000,
            n_test: 2_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "I")]
    pub heads: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_tuned: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub causal: bool,
    pub spatial_split_heads: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            f: m.f,
            heads: m.heads,
            d: m.d,
            n_layers: m.n_layers,
            n_tuned: m.n_tuned,
            n_heads: m.n_heads,
            ffn_mult: m.ffn_mult,
            causal: m.causal,
            spatial_split_heads: m.spatial_split_heads,
        }
    }
}

/// Which channels the SNR sweep evaluates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// All far-field (`L0 = L`) and all near-field (`L0 = 0`).
    Pure,
    /// Far-dominant (`L0 = L − 1`) and near-dominant (`L0 = 1`).
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub snr_grid_db: Vec<f64>,
    /// Path counts of the SNR-sweep scenarios.
    pub snr_sweep_paths: Vec<usize>,
    pub snr_sweep_mode: SweepMode,
    /// Far-path counts of the path sweep; empty means `0..=L`.
    pub l0_grid: Vec<usize>,
    pub path_sweep_snr_db: f64,
    pub samples_per_point: usize,
    /// Training channels used to estimate the LMMSE covariance.
    pub lmmse_samples: usize,
    pub hyomp_distances: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_grid_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            snr_sweep_paths: vec![3, 6],
            snr_sweep_mode: SweepMode::Pure,
            l0_grid: Vec::new(),
            path_sweep_snr_db: 15.0,
            samples_per_point: 1000,
            lmmse_samples: 10_000,
            hyomp_distances: 8,
            seed: 2,
        }
    }
}

/// Full experiment description. Every key is optional; missing keys take
/// the defaults above and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub array: ArraySection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

/// Dataset split, used to derive disjoint per-sample seed ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.xced",
            Split::Val => "val.xced",
            Split::Test => "test.xced",
        }
    }
}

/// First sample seed of a split: `seed·2³² + k·2³⁰`, leaving room for 2³⁰
/// samples per split.
pub fn split_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_shl(32).wrapping_add(k << 30)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| XceError::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            XceError::Config(m) => XceError::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.array_config()?;
        self.dataset_spec(Split::Train)?.validate()?;
        self.dataset_spec(Split::Test)?.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.samples_per_point == 0 || e.snr_grid_db.is_empty() || e.hyomp_distances == 0 {
            bail!(Config, "eval needs a non-empty SNR grid, samples_per_point >= 1 and hyomp_distances >= 1");
        }
        if e.snr_grid_db.iter().chain([&e.path_sweep_snr_db]).any(|x| !x.is_finite()) {
            bail!(Config, "eval SNR values must be finite");
        }
        if e.snr_sweep_paths.contains(&0) {
            bail!(Config, "snr_sweep_paths entries must be at least 1");
        }
        if let Some(&l0) = e.l0_grid.iter().find(|&&l0| l0 > self.dataset.paths) {
            bail!(Config, "l0_grid entry {} exceeds L = {}", l0, self.dataset.paths);
        }
        Ok(())
    }

    pub fn array_config(&self) -> Result<ArrayConfig> {
        ArrayConfig::new(self.array.m, self.array.lambda).map_err(|e| XceError::Config(e.to_string()))
    }

    pub fn dataset_spec(&self, split: Split) -> Result<DatasetSpec> {
        let d = &self.dataset;
        let (n, snr, k) = match split {
            Split::Train => (d.n_train, d.snr, 0),
            Split::Val => (d.n_val, d.snr, 1),
            Split::Test => (d.n_test, d.test_snr, 2),
        };
        Ok(DatasetSpec {
            array: self.array_config()?,
            paths: d.paths,
            far_paths: d.far_paths,
            r_range: (d.r_min, d.r_max),
            snr,
            n_samples: n,
            base_seed: split_seed(d.seed, k),
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            m: self.array.m,
            f: m.f,
            heads: m.heads,
            d: m.d,
            n_layers: m.n_layers,
            n_tuned: m.n_tuned,
            n_heads: m.n_heads,
            ffn_mult: m.ffn_mult,
            causal: m.causal,
            spatial_split_heads: m.spatial_split_heads,
        }
    }

    /// Genie-aided HY-OMP settings for a `(L, L0)` mix.
    pub fn hyomp_config(&self, paths: usize, far_paths: usize) -> Result<HyOmpConfig> {
        let mut c = HyOmpConfig::default_for(&self.array_config()?, (self.dataset.r_min, self.dataset.r_max), paths, far_paths);
        let (lo, hi) = (self.dataset.r_min, self.dataset.r_max);
        let n = self.eval.hyomp_distances;
        c.near_distances = if n == 1 || lo == hi {
            vec![lo]
        } else {
            (0..n).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
        };
        Ok(c)
    }

    /// Seed of the model initialisation, derived from the training seed.
    pub fn init_seed(&self) -> u64 {
        self.train.seed.wrapping_add(0x5eed)
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of [`ExperimentConfig::to_toml`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn l0_grid(&self) -> Vec<usize> {
        if self.eval.l0_grid.is_empty() {
            (0..=self.dataset.paths).collect()
        } else {
            self.eval.l0_grid.clone()
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" | ")
}
