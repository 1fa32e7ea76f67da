//! Classic and fast alignment networks, the synthetic dataset, and training.

mod classic;
mod config;
mod dataset;
mod fast;
mod train;

use std::path::Path;

pub use classic::{classic_cnn_specs, classic_forward, ClassicCache, ClassicDhmNetwork};
pub use config::{Ablation, PipelineConfig, Variant};
pub use dataset::{
    denormalize_coord, generate_synthetic_dataset, normalize_coord, normalized_landmarks, pixel_landmarks, yaw_bin,
    Dataset, DatasetConfig, Sample, DATASET_SCHEMA_VERSION, YAW_BIN_EDGES,
};
pub use fast::{fast_cnn_specs, fast_forward, FastCache, FastDhmNetwork, SeparableBlock, INPUT_CHANNELS};
pub use train::{train, train_network, TrainingLog, TrainingLogRow};

use crate::diffusion_heatmap::{mean_initial_heatmap, DiffusionHeatMap};
use crate::error::{Error, Result};
use crate::morphable_model::{Landmarks2D, MorphableModel, PoseShapeParams};
use crate::serialization::{ChunkFile, DType};
use crate::tensor_nn::{total, CostReport, LayerCost, Scalar, Tensor};

/// Output of one alignment pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    /// Final landmarks, pixels.
    pub landmarks: Landmarks2D,
    /// Landmarks before the first recurrence step.
    pub initial: Landmarks2D,
    /// Landmarks after each of the `T` steps.
    pub stages: Vec<Landmarks2D>,
    /// Physical states `s_0 ..= s_T` (classic variant).
    pub params: Option<Vec<Vec<f64>>>,
    /// Heat map consumed by each iteration (classic variant).
    pub heatmaps: Vec<DiffusionHeatMap>,
    pub stage_seconds: Vec<f64>,
    pub mult_adds: u64,
}

/// Inputs shared by every sample of a run.
#[derive(Clone, Debug)]
pub struct AlignmentContext {
    pub model: MorphableModel,
    pub initial_params: PoseShapeParams,
    pub mean_map: DiffusionHeatMap,
}

impl AlignmentContext {
    pub fn new(model: &MorphableModel, config: &PipelineConfig) -> Result<Self> {
        let size = config.image_size;
        let initial_params = model.default_pose(size);
        let mean_map = mean_initial_heatmap(model, &initial_params, (size, size), config.sigma)?;
        Ok(AlignmentContext {
            model: model.clone(),
            initial_params,
            mean_map,
        })
    }
}

/// Either network variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Network<T = f64> {
    Fast(FastDhmNetwork<T>),
    Classic(ClassicDhmNetwork<T>),
}

/// Per-sample objective, gradient and stage predictions.
pub struct SampleGradient<T = f64> {
    pub loss: f64,
    pub grads: Network<T>,
    /// Normalized 2L predictions for every readout, `t = 0..=T`.
    pub stage_predictions: Vec<Vec<f64>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: &PipelineConfig, model: &MorphableModel, seed: u64) -> Result<Self> {
        Ok(match config.variant {
            Variant::FastDhm => Network::Fast(FastDhmNetwork::new(config.clone(), model, seed)?),
            Variant::ClassicDhm => Network::Classic(ClassicDhmNetwork::new(config.clone(), model, seed)?),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        match self {
            Network::Fast(n) => &n.config,
            Network::Classic(n) => &n.config,
        }
    }

    pub fn align(&self, ctx: &AlignmentContext, image: &Tensor<f64>) -> Result<AlignmentResult> {
        match self {
            Network::Fast(n) => fast_forward(n, image, &ctx.mean_map),
            Network::Classic(n) => classic_forward(n, &ctx.model, image, &ctx.initial_params),
        }
    }

    pub fn cost_table(&self) -> Vec<LayerCost> {
        match self {
            Network::Fast(n) => n.cost_table(),
            Network::Classic(n) => n.cost_table(),
        }
    }

    pub fn cost(&self) -> CostReport {
        total(&self.cost_table())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Network::Fast(n) => n.params(),
            Network::Classic(n) => n.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Network::Fast(n) => n.params_mut(),
            Network::Classic(n) => n.params_mut(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Network::Fast(n) => Network::Fast(n.zeros_like()),
            Network::Classic(n) => Network::Classic(n.zeros_like()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        match self {
            Network::Fast(n) => Network::Fast(n.cast()),
            Network::Classic(n) => Network::Classic(n.cast()),
        }
    }

    pub fn to_chunk_file(&self, dtype: DType) -> ChunkFile {
        match self {
            Network::Fast(n) => n.to_chunk_file(dtype),
            Network::Classic(n) => n.to_chunk_file(dtype),
        }
    }

    pub fn from_chunk_file(f: &ChunkFile) -> Result<Self> {
        match f.kind.as_str() {
            "fast_dhm" => Ok(Network::Fast(FastDhmNetwork::from_chunk_file(f)?)),
            "classic_dhm" => Ok(Network::Classic(ClassicDhmNetwork::from_chunk_file(f)?)),
            other => Err(Error::Data(format!("'{other}' is not a network file"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_chunk_file(DType::F64).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_chunk_file(&ChunkFile::load(path)?)
    }

    /// Errors unless `model` has the dimensions the network was built for.
    pub fn check_model(&self, model: &MorphableModel) -> Result<()> {
        fast::check_model(self.config(), model).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Loss weight of readout `t` out of `0..=steps`.
pub fn stage_weight(config: &PipelineConfig, t: usize, steps: usize) -> f64 {
    if t == steps {
        1.0
    } else if t == 0 && config.variant == Variant::ClassicDhm {
        0.0
    } else {
        config.stage_loss_weight
    }
}

/// `Σ_t w_t·‖u_t − u*‖²` over the weighted readouts, with the gradient of
/// every readout.
fn stage_losses(config: &PipelineConfig, predictions: &[Vec<f64>], target: &[f64]) -> (f64, Vec<Option<Vec<f64>>>) {
    let steps = predictions.len() - 1;
    let mut loss = 0.0;
    let grads = predictions
        .iter()
        .enumerate()
        .map(|(t, u)| {
            let w = stage_weight(config, t, steps);
            if w == 0.0 {
                return None;
            }
            let diff: Vec<f64> = u.iter().zip(target).map(|(a, b)| a - b).collect();
            loss += w * diff.iter().map(|d| d * d).sum::<f64>();
            Some(diff.into_iter().map(|d| 2.0 * w * d).collect())
        })
        .collect();
    (loss, grads)
}

impl Network<f64> {
    /// Forward and backward pass for one training sample. Heat maps are
    /// treated as constant inputs.
    pub fn sample_gradient(&self, ctx: &AlignmentContext, image: &Tensor<f64>, target: &[f64]) -> Result<SampleGradient> {
        let mut grads = self.zeros_like();
        match (self, &mut grads) {
            (Network::Fast(n), Network::Fast(g)) => {
                let stack = crate::diffusion_heatmap::build_input_stack(image, &ctx.mean_map)?;
                let cache = n.forward_cached(&stack.data)?;
                let (loss, gs) = stage_losses(&n.config, &cache.stage_outputs, target);
                n.backward(&cache, &gs, g)?;
                Ok(SampleGradient {
                    loss,
                    grads,
                    stage_predictions: cache.stage_outputs,
                })
            }
            (Network::Classic(n), Network::Classic(g)) => {
                let cache = n.forward_cached(&ctx.model, image, &ctx.initial_params, None)?;
                let size = n.config.image_size;
                let predictions = cache
                    .states
                    .iter()
                    .map(|s| Ok(normalized_landmarks(&n.state_landmarks(&ctx.model, s)?, size)))
                    .collect::<Result<Vec<_>>>()?;
                let (loss, gu) = stage_losses(&n.config, &predictions, target);
                let gq = gu
                    .iter()
                    .zip(&cache.states)
                    .map(|(g, s)| g.as_ref().map(|g| n.state_vjp(&ctx.model, s, g)).transpose())
                    .collect::<Result<Vec<_>>>()?;
                n.backward(&cache, &gq, g)?;
                Ok(SampleGradient {
                    loss,
                    grads,
                    stage_predictions: predictions,
                })
            }
            _ => unreachable!("zeros_like keeps the variant"),
        }
    }
}
