//! Physics-informed neural calibrator.
//!
//! A small convolutional or patch-attention backbone feeds four heads: a DO
//! regression correction, per-pixel Stern–Volmer maps, a confidence mask and
//! a biofouling score. The DO estimate itself comes from a differentiable
//! per-frame layer: a learned frame gain rescales the intensities, then a
//! weighted least-squares fit of the Stern–Volmer relation pooled over the
//! film gives the oxygen level. The confidence mask sets the weights, which
//! are refined by two robust reweighting steps. The PGNN variant swaps the learned maps for
//! frozen per-pixel fits supplied as extra input channels.

pub mod diag;
pub mod model;
pub mod serialize;
pub mod tape;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use diag::{gradient_check, residual_map, spearman, GradientCheck};
pub use model::{composite_loss, FrozenMaps, LossBreakdown, Model, ModelOutputs, Normalization};
pub use train::{train, train_pgnn, train_plain, train_with, EpochRecord, TrainKind, TrainedModel};

/// Scale that turns DO errors into a dimensionless data loss.
pub const DO_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    ConvSmall,
    AttentionSmall,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::ConvSmall => "conv_small",
            Backbone::AttentionSmall => "attention_small",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Patch side for the attention backbone.
    pub patch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads_attn: usize,
    pub lambda_physics: f64,
    pub lambda_biofouling: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Random horizontal/vertical flips of training frames.
    pub augment: bool,
    /// Learning-rate multiplier for the per-pixel parameter maps.
    pub map_lr_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ConvSmall,
            patch: 8,
            embed_dim: 64,
            layers: 2,
            heads_attn: 4,
            lambda_physics: 1.0,
            lambda_biofouling: 0.1,
            lr: 3e-3,
            weight_decay: 1e-4,
            epochs: 30,
            seed: 0,
            batch_size: 8,
            augment: true,
            map_lr_scale: 3.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads_attn == 0 || !self.embed_dim.is_multiple_of(self.heads_attn) {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads_attn {}",
                self.embed_dim, self.heads_attn
            ));
        }
        if self.backbone == Backbone::AttentionSmall {
            if self.patch == 0 || !width.is_multiple_of(self.patch) || !height.is_multiple_of(self.patch) {
                return bad(format!("patch {} must divide the {width}x{height} grid", self.patch));
            }
            if self.layers == 0 {
                return bad("attention backbone needs at least one layer".into());
            }
        }
        if self.backbone == Backbone::ConvSmall && self.embed_dim < 4 {
            return bad("conv backbone needs embed_dim >= 4".into());
        }
        for (name, v) in [("lambda_physics", self.lambda_physics), ("lambda_biofouling", self.lambda_biofouling)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay), ("map_lr_scale", self.map_lr_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        Ok(())
    }
}
