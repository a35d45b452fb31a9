use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Antenna count; must be a perfect square.
    pub m: usize,
    /// Convolution filters, also the feature width of the embedding blocks.
    pub f: usize,
    /// Heads of the embedding attentions.
    pub heads: usize,
    /// Backbone width.
    pub d: usize,
    pub n_layers: usize,
    /// Top backbone layers left trainable.
    pub n_tuned: usize,
    /// Backbone attention heads.
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub causal: bool,
    /// Spatial branch head width `M / heads` instead of `M`.
    pub spatial_split_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { m: 256, f: 64, heads: 4, d: 64, n_layers: 4, n_tuned: 2, n_heads: 4, ffn_mult: 4, causal: true, spatial_split_heads: false }
    }
}

impl ModelConfig {
    /// The width-768, 12-layer, 12-head backbone configuration.
    pub fn full_scale() -> Self {
        Self { d: 768, n_layers: 12, n_heads: 12, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side().is_none() {
            bail!(Config, "model M = {} is not a perfect square", self.m);
        }
        for (name, v) in [("F", self.f), ("I", self.heads), ("d", self.d), ("n_heads", self.n_heads), ("ffn_mult", self.ffn_mult)] {
            if v == 0 {
                bail!(Config, "model {} must be at least 1", name);
            }
        }
        if self.n_tuned > self.n_layers {
            bail!(Config, "n_tuned = {} exceeds n_layers = {}", self.n_tuned, self.n_layers);
        }
        if !self.d.is_multiple_of(self.n_heads) {
            bail!(Config, "d = {} is not divisible by n_heads = {}", self.d, self.n_heads);
        }
        if self.spatial_split_heads && !self.m.is_multiple_of(self.heads) {
            bail!(Config, "M = {} is not divisible by I = {} for split spatial heads", self.m, self.heads);
        }
        Ok(())
    }

    /// `√M` when `M` is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let s = (self.m as f64).sqrt().round() as usize;
        (self.m > 0 && s * s == self.m).then_some(s)
    }

    pub(crate) fn side(&self) -> usize {
        self.grid_side().expect("validated config")
    }

    /// Per-head width of the spatial branch.
    pub fn spatial_head_dim(&self) -> usize {
        if self.spatial_split_heads {
            self.m / self.heads
        } else {
            self.m
        }
    }

    /// Number of leading backbone layers that stay frozen.
    pub fn n_frozen(&self) -> usize {
        self.n_layers - self.n_tuned
    }
}
