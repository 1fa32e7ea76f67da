use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::evolutionary_rnn::{IncrementSource, DEFAULT_STEPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Per-iteration heat-map regeneration with a parameter-space RNN.
    ClassicDhm,
    /// One mean-initialised input, factorized CNN and feature-space recurrence.
    #[default]
    FastDhm,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ClassicDhm => "classic_dhm",
            Variant::FastDhm => "fast_dhm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classic_dhm" | "classic" => Some(Variant::ClassicDhm),
            "fast_dhm" | "fast" => Some(Variant::FastDhm),
            _ => None,
        }
    }
}

/// Classic-variant ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Location-only splat map of the initial landmarks; the RNN regresses
    /// 3L landmark offsets instead of model parameters.
    NoHeatmap2dRnn,
    /// A single feedforward regression step.
    NoRecurrence3dCnn,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoHeatmap2dRnn => "no_heatmap_2d_rnn",
            Ablation::NoRecurrence3dCnn => "no_recurrence_3d_cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Ablation::None),
            "no_heatmap_2d_rnn" => Some(Ablation::NoHeatmap2dRnn),
            "no_recurrence_3d_cnn" => Some(Ablation::NoRecurrence3dCnn),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub image_size: usize,
    pub landmarks: usize,
    pub id_dims: usize,
    pub exp_dims: usize,
    /// Recurrence steps `T`.
    pub steps: usize,
    pub width_multiplier: usize,
    pub kernel_size: usize,
    pub sigma: f64,
    /// Depthwise-separable blocks after the fast stem.
    pub cnn_block_count: usize,
    /// Output channels of each classic conv+pool layer (before the multiplier).
    pub classic_channels: Vec<usize>,
    pub hidden_dim: usize,
    pub increment: IncrementSource,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` picks the variant default.
    pub learning_rate: Option<f64>,
    /// Classic schedule: multiply by `lr_decay` every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Fast schedule: learning rate after `lr_reset_epoch` (default half the epochs).
    pub lr_reset_value: f64,
    pub lr_reset_epoch: Option<usize>,
    /// Weight of the intermediate-stage losses relative to the final one.
    pub stage_loss_weight: f64,
    /// Global gradient max-norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::FastDhm,
            image_size: 64,
            landmarks: 68,
            id_dims: 8,
            exp_dims: 4,
            steps: DEFAULT_STEPS,
            width_multiplier: 1,
            kernel_size: 3,
            sigma: crate::diffusion_heatmap::DEFAULT_SIGMA,
            cnn_block_count: 5,
            classic_channels: vec![8, 16, 16, 32],
            hidden_dim: 128,
            increment: IncrementSource::Current,
            ablation: Ablation::None,
            batch_size: 16,
            epochs: 120,
            learning_rate: None,
            lr_decay: 0.95,
            lr_decay_every: 2000,
            lr_reset_value: 1e-5,
            lr_reset_epoch: None,
            stage_loss_weight: 0.0,
            grad_clip: None,
        }
    }
}

impl PipelineConfig {
    pub fn fast() -> Self {
        PipelineConfig::default()
    }

    pub fn classic() -> Self {
        PipelineConfig {
            variant: Variant::ClassicDhm,
            ..PipelineConfig::default()
        }
    }

    /// Stride-2 stages in the fast CNN: the stem plus blocks 1, 3, 5, ...
    pub fn fast_downsampling(&self) -> usize {
        1 << (1 + self.cnn_block_count.div_ceil(2))
    }

    pub fn classic_downsampling(&self) -> usize {
        1 << self.classic_channels.len()
    }

    pub fn downsampling(&self) -> usize {
        match self.variant {
            Variant::FastDhm => self.fast_downsampling(),
            Variant::ClassicDhm => self.classic_downsampling(),
        }
    }

    pub fn effective_steps(&self) -> usize {
        match (self.variant, self.ablation) {
            (Variant::ClassicDhm, Ablation::NoRecurrence3dCnn) => 1,
            _ => self.steps,
        }
    }

    pub fn initial_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.variant {
            Variant::ClassicDhm => 0.001,
            Variant::FastDhm => 0.005,
        })
    }

    /// Learning rate for an optimizer step taken during `epoch` after
    /// `iteration` earlier steps.
    pub fn learning_rate_at(&self, epoch: usize, iteration: usize) -> f64 {
        let lr0 = self.initial_learning_rate();
        match self.variant {
            Variant::ClassicDhm => lr0 * self.lr_decay.powi((iteration / self.lr_decay_every.max(1)) as i32),
            Variant::FastDhm => {
                let reset = self.lr_reset_epoch.unwrap_or(self.epochs / 2);
                if epoch >= reset && lr0 > 0.0 {
                    self.lr_reset_value
                } else {
                    lr0
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.image_size > 0, "image_size must be positive");
        contract!(self.landmarks >= 4, "need at least 4 landmarks, got {}", self.landmarks);
        contract!(self.steps >= 1, "steps must be at least 1");
        contract!(self.width_multiplier >= 1, "width_multiplier must be at least 1");
        contract!(self.kernel_size % 2 == 1, "kernel_size must be odd, got {}", self.kernel_size);
        contract!(self.sigma > 0.0, "sigma must be positive");
        contract!(self.batch_size >= 1, "batch_size must be at least 1");
        contract!(self.hidden_dim >= 1, "hidden_dim must be at least 1");
        contract!(self.stage_loss_weight >= 0.0, "stage_loss_weight must be non-negative");
        contract!(
            self.learning_rate.is_none_or(|lr| lr >= 0.0),
            "learning_rate must be non-negative"
        );
        match self.variant {
            Variant::FastDhm => contract!(self.cnn_block_count >= 1, "need at least one fast CNN block"),
            Variant::ClassicDhm => contract!(
                !self.classic_channels.is_empty() && self.classic_channels.iter().all(|&c| c > 0),
                "classic_channels must be non-empty and positive"
            ),
        }
        let d = self.downsampling();
        contract!(
            self.image_size.is_multiple_of(d),
            "image_size {} is not divisible by the CNN downsampling factor {d}",
            self.image_size
        );
        Ok(())
    }
}
