use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{PipelineConfig, Variant};
use super::dataset::{normalized_landmarks, pixel_landmarks};
use super::AlignmentResult;
use crate::diffusion_heatmap::{build_input_stack, DiffusionHeatMap};
use crate::error::{contract, Error, Result};
use crate::evolutionary_rnn::{fast_backward, fast_unroll, FastRecurrentCell, FastTrace};
use crate::morphable_model::MorphableModel;
use crate::serialization::{ChunkFile, DType};
use crate::tensor_nn::{
    cost_of_dense, cost_of_rect, relu_backward, relu_forward, Conv2d, ConvSpec, CostReport, LayerCost, Linear, Scalar,
    Tensor,
};

/// Channels of the image + heat-map input stack.
pub const INPUT_CHANNELS: usize = 6;

/// Depthwise 3×3 followed by pointwise 1×1, each with ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableBlock<T = f64> {
    pub depthwise: Conv2d<T>,
    pub pointwise: Conv2d<T>,
}

/// Fast DHM: stride-2 stem, depthwise-separable blocks, factorized
/// recurrent cell, and a fully-connected head shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FastDhmNetwork<T = f64> {
    pub config: PipelineConfig,
    pub stem: Conv2d<T>,
    pub blocks: Vec<SeparableBlock<T>>,
    pub cell: FastRecurrentCell<T>,
    pub head: Linear<T>,
}

/// Spatial size, channel plan and specs of the CNN for `cfg`.
pub fn fast_cnn_specs(cfg: &PipelineConfig) -> (ConvSpec, Vec<(ConvSpec, ConvSpec)>) {
    let c0 = 8 * cfg.width_multiplier;
    let stem = ConvSpec::standard(cfg.kernel_size, INPUT_CHANNELS, c0, 2);
    let mut c = c0;
    let blocks = (1..=cfg.cnn_block_count)
        .map(|i| {
            let stride = if i % 2 == 1 { 2 } else { 1 };
            let cout = if stride == 2 { 2 * c } else { c };
            let pair = (ConvSpec::depthwise(cfg.kernel_size, c, stride), ConvSpec::pointwise(c, cout));
            c = cout;
            pair
        })
        .collect();
    (stem, blocks)
}

struct BlockCache<T> {
    input: Tensor<T>,
    dw_pre: Tensor<T>,
    dw_out: Tensor<T>,
    pw_pre: Tensor<T>,
}

/// Everything the backward pass needs from one forward pass.
pub struct FastCache<T = f64> {
    input: Tensor<T>,
    stem_pre: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    pub trace: FastTrace<T>,
    /// Head outputs for `F_0 ..= F_T`, normalized coordinates.
    pub stage_outputs: Vec<Vec<T>>,
    pub mult_adds: u64,
    pub stage_seconds: Vec<f64>,
}

impl<T: Scalar> FastDhmNetwork<T> {
    pub fn new(config: PipelineConfig, model: &MorphableModel, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, model, &mut rng)
    }

    /// Random CNN and cell weights; the head starts at zero weight with its
    /// bias on the mean-shape landmarks, so the untrained network predicts
    /// the mean initialisation.
    pub fn init<R: Rng + ?Sized>(config: PipelineConfig, model: &MorphableModel, rng: &mut R) -> Result<Self> {
        config.validate()?;
        contract!(config.variant == Variant::FastDhm, "configuration is not a fast_dhm configuration");
        check_model(&config, model)?;
        let (stem_spec, block_specs) = fast_cnn_specs(&config);
        let stem = Conv2d::init(stem_spec, true, rng);
        let blocks = block_specs
            .iter()
            .map(|&(dw, pw)| SeparableBlock {
                depthwise: Conv2d::init(dw, true, rng),
                pointwise: Conv2d::init(pw, true, rng),
            })
            .collect();
        let channels = block_specs.last().map_or(stem_spec.out_channels, |b| b.1.out_channels);
        let cell = FastRecurrentCell::init(channels, config.kernel_size, rng);
        let fs = config.image_size / config.fast_downsampling();
        let mut head = Linear::zeros(fs * fs * channels, 2 * config.landmarks, true);
        let mean = model.project_weak_perspective(&model.default_pose(config.image_size))?;
        let bias: Vec<T> = normalized_landmarks(&mean, config.image_size).into_iter().map(T::of).collect();
        head.bias = Some(Tensor::from_vec(&[bias.len()], bias)?);
        Ok(FastDhmNetwork {
            config,
            stem,
            blocks,
            cell,
            head,
        })
    }

    pub fn feature_size(&self) -> usize {
        self.config.image_size / self.config.fast_downsampling()
    }

    pub fn feature_channels(&self) -> usize {
        self.cell.channels()
    }

    /// Runs the CNN, `T` recurrence steps and the head readout of every state.
    pub fn forward_cached(&self, input: &Tensor<T>) -> Result<FastCache<T>> {
        let (h, w, c) = input.hwc()?;
        contract!(
            (h, w, c) == (self.config.image_size, self.config.image_size, INPUT_CHANNELS),
            "input stack is {h}×{w}×{c}, network expects {0}×{0}×{INPUT_CHANNELS}",
            self.config.image_size
        );
        let start = Instant::now();
        let mut macs = 0u64;
        let mut count = |spec: &ConvSpec, out: &Tensor<T>| {
            macs += cost_of_rect(spec, out.shape()[0], out.shape()[1]).mult_adds;
        };
        let input = centre_input(input);
        let stem_pre = self.stem.forward(&input)?;
        count(&self.stem.spec, &stem_pre);
        let mut x = relu_forward(&stem_pre);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let dw_pre = b.depthwise.forward(&x)?;
            count(&b.depthwise.spec, &dw_pre);
            let dw_out = relu_forward(&dw_pre);
            let pw_pre = b.pointwise.forward(&dw_out)?;
            count(&b.pointwise.spec, &pw_pre);
            let next = relu_forward(&pw_pre);
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, next),
                dw_pre,
                dw_out,
                pw_pre,
            });
        }
        let mut stage_seconds = vec![start.elapsed().as_secs_f64()];
        let steps = self.config.steps;
        let fs = x.shape()[0];
        let step_specs = [
            self.cell.hidden_pointwise.spec,
            self.cell.hidden_depthwise.spec,
            self.cell.input_depthwise.spec,
        ];
        let cell_start = Instant::now();
        let trace = fast_unroll(&self.cell, &x, steps)?;
        let cell_time = cell_start.elapsed().as_secs_f64();
        macs += cost_of_rect(&self.cell.init_pointwise.spec, fs, fs).mult_adds;
        macs += steps as u64 * step_specs.iter().map(|s| cost_of_rect(s, fs, fs).mult_adds).sum::<u64>();
        let head_start = Instant::now();
        let stage_outputs = trace
            .states
            .iter()
            .map(|f| self.head.forward(f.data()))
            .collect::<Result<Vec<_>>>()?;
        let head_time = head_start.elapsed().as_secs_f64() / (steps + 1) as f64;
        macs += (steps as u64 + 1) * cost_of_dense(self.head.inputs(), self.head.outputs()).mult_adds;
        stage_seconds[0] += head_time;
        stage_seconds.extend((0..steps).map(|_| cell_time / steps as f64 + head_time));
        Ok(FastCache {
            input,
            stem_pre,
            blocks,
            trace,
            stage_outputs,
            mult_adds: macs,
            stage_seconds,
        })
    }

    /// Backpropagates `grad_stages[t] = dL/d(stage output t)` for `t = 0..=T`.
    pub fn backward(&self, cache: &FastCache<T>, grad_stages: &[Option<Vec<T>>], grads: &mut FastDhmNetwork<T>) -> Result<()> {
        let steps = cache.trace.steps();
        contract!(
            grad_stages.len() == steps + 1,
            "need {} stage gradients, got {}",
            steps + 1,
            grad_stages.len()
        );
        let mut grad_states = Vec::with_capacity(steps + 1);
        for (state, g) in cache.trace.states.iter().zip(grad_stages) {
            grad_states.push(match g {
                Some(g) => {
                    let gf = self.head.backward(state.data(), g, &mut grads.head)?;
                    Some(Tensor::from_vec(state.shape(), gf)?)
                }
                None => None,
            });
        }
        let mut g = fast_backward(&self.cell, &cache.trace, &grad_states, &mut grads.cell)?;
        for ((b, bc), gb) in self.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
            g = relu_backward(&bc.pw_pre, &g)?;
            g = b.pointwise.backward(&bc.dw_out, &g, &mut gb.pointwise)?;
            g = relu_backward(&bc.dw_pre, &g)?;
            g = b.depthwise.backward(&bc.input, &g, &mut gb.depthwise)?;
        }
        let g = relu_backward(&cache.stem_pre, &g)?;
        self.stem.backward(&cache.input, &g, &mut grads.stem)?;
        Ok(())
    }

    /// Stem and blocks, one row per layer.
    pub fn cnn_cost_rows(&self) -> Vec<LayerCost> {
        let mut rows = Vec::new();
        let mut size = self.config.image_size;
        let mut push = |name: String, spec: &ConvSpec, size: &mut usize| {
            *size = size.div_ceil(spec.stride);
            rows.push(LayerCost::new(name, spec.mode.as_str(), cost_of_rect(spec, *size, *size)));
        };
        push("stem".into(), &self.stem.spec, &mut size);
        for (i, b) in self.blocks.iter().enumerate() {
            push(format!("block{}.depthwise", i + 1), &b.depthwise.spec, &mut size);
            push(format!("block{}.pointwise", i + 1), &b.pointwise.spec, &mut size);
        }
        rows
    }

    /// Every layer once, with mult-adds summed over all of its uses in one
    /// forward pass.
    pub fn cost_table(&self) -> Vec<LayerCost> {
        let mut rows = self.cnn_cost_rows();
        let fs = self.feature_size();
        let steps = self.config.steps as u64;
        for (name, layer) in self.cell.layers() {
            let once = cost_of_rect(&layer.spec, fs, fs);
            let uses = if name == "rnn.init_pointwise" { 1 } else { steps };
            rows.push(LayerCost::new(
                name,
                layer.spec.mode.as_str(),
                CostReport {
                    mult_adds: once.mult_adds * uses,
                    parameters: once.parameters,
                },
            ));
        }
        let head = cost_of_dense(self.head.inputs(), self.head.outputs());
        rows.push(LayerCost::new(
            "head",
            "dense",
            CostReport {
                mult_adds: head.mult_adds * (steps + 1),
                parameters: head.parameters,
            },
        ));
        rows
    }

    /// Mult-adds of the separable blocks and of the same blocks built from
    /// standard convolutions.
    pub fn separable_vs_standard(&self, min_width: usize) -> (u64, u64) {
        let mut size = self.config.image_size.div_ceil(self.stem.spec.stride);
        let (mut sep, mut std) = (0, 0);
        for b in &self.blocks {
            let s = b.depthwise.spec.stride;
            size = size.div_ceil(s);
            if b.pointwise.spec.out_channels < min_width {
                continue;
            }
            sep += cost_of_rect(&b.depthwise.spec, size, size).mult_adds
                + cost_of_rect(&b.pointwise.spec, size, size).mult_adds;
            let standard = ConvSpec::standard(
                b.depthwise.spec.kernel_size,
                b.pointwise.spec.in_channels,
                b.pointwise.spec.out_channels,
                s,
            );
            std += cost_of_rect(&standard, size, size).mult_adds;
        }
        (sep, std)
    }

    pub fn zeros_like(&self) -> Self {
        FastDhmNetwork {
            config: self.config.clone(),
            stem: self.stem.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| SeparableBlock {
                    depthwise: b.depthwise.zeros_like(),
                    pointwise: b.pointwise.zeros_like(),
                })
                .collect(),
            cell: self.cell.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FastDhmNetwork<U> {
        FastDhmNetwork {
            config: self.config.clone(),
            stem: self.stem.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| SeparableBlock {
                    depthwise: b.depthwise.cast(),
                    pointwise: b.pointwise.cast(),
                })
                .collect(),
            cell: self.cell.cast(),
            head: self.head.cast(),
        }
    }

    fn named_layers(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut v = vec![("stem".to_string(), &self.stem)];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{}.depthwise", i + 1), &b.depthwise));
            v.push((format!("block{}.pointwise", i + 1), &b.pointwise));
        }
        v.extend(self.cell.layers().map(|(n, l)| (n.to_string(), l)));
        v
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.depthwise.params());
            p.extend(b.pointwise.params());
        }
        p.extend(self.cell.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.stem.params_mut();
        for b in &mut self.blocks {
            p.extend(b.depthwise.params_mut());
            p.extend(b.pointwise.params_mut());
        }
        p.extend(self.cell.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn to_chunk_file(&self, dtype: DType) -> ChunkFile {
        let mut f = ChunkFile::new(
            "fast_dhm",
            json!({"config": self.config, "cell": "fast"}),
        );
        for (name, layer) in self.named_layers() {
            f.push_tensor(format!("{name}.weight"), &layer.weight, dtype);
            if let Some(b) = &layer.bias {
                f.push_tensor(format!("{name}.bias"), b, dtype);
            }
        }
        f.push_tensor("head.weight", &self.head.weight, dtype);
        if let Some(b) = &self.head.bias {
            f.push_tensor("head.bias", b, dtype);
        }
        f
    }

    pub fn from_chunk_file(f: &ChunkFile) -> Result<Self> {
        f.expect_kind("fast_dhm")?;
        let config: PipelineConfig = serde_json::from_value(f.meta["config"].clone())
            .map_err(|e| Error::Data(format!("fast_dhm metadata: {e}")))?;
        config.validate().map_err(|e| Error::Data(e.to_string()))?;
        let (stem_spec, block_specs) = fast_cnn_specs(&config);
        let load = |name: &str, spec: ConvSpec, bias: bool| -> Result<Conv2d<T>> {
            let weight = f.tensor(&format!("{name}.weight"))?;
            if weight.shape() != spec.weight_shape().as_slice() {
                return Err(Error::Data(format!("chunk {name}.weight has shape {:?}", weight.shape())));
            }
            let bias = if bias { Some(f.tensor(&format!("{name}.bias"))?) } else { None };
            Ok(Conv2d { spec, weight, bias })
        };
        let stem = load("stem", stem_spec, true)?;
        let mut blocks = Vec::new();
        for (i, &(dw, pw)) in block_specs.iter().enumerate() {
            blocks.push(SeparableBlock {
                depthwise: load(&format!("block{}.depthwise", i + 1), dw, true)?,
                pointwise: load(&format!("block{}.pointwise", i + 1), pw, true)?,
            });
        }
        let c = block_specs.last().map_or(stem_spec.out_channels, |b| b.1.out_channels);
        let k = config.kernel_size;
        let cell = FastRecurrentCell {
            input_depthwise: load("rnn.input_depthwise", ConvSpec::depthwise(k, c, 1), false)?,
            hidden_depthwise: load("rnn.hidden_depthwise", ConvSpec::depthwise(k, c, 1), false)?,
            hidden_pointwise: load("rnn.hidden_pointwise", ConvSpec::pointwise(c, c), false)?,
            init_pointwise: load("rnn.init_pointwise", ConvSpec::pointwise(c, c), false)?,
        };
        let fs = config.image_size / config.fast_downsampling();
        let head = Linear {
            weight: f.tensor("head.weight")?,
            bias: Some(f.tensor("head.bias")?),
        };
        if head.weight.shape() != [2 * config.landmarks, fs * fs * c] {
            return Err(Error::Data(format!("head weight has shape {:?}", head.weight.shape())));
        }
        Ok(FastDhmNetwork {
            config,
            stem,
            blocks,
            cell,
            head,
        })
    }
}

/// Shifts `[0, 1]` image and heat-map values to `[-0.5, 0.5]`.
pub(crate) fn centre_input<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut c = x.clone();
    let half = T::of(0.5);
    c.data_mut().iter_mut().for_each(|v| *v -= half);
    c
}

pub(crate) fn check_model(config: &PipelineConfig, model: &MorphableModel) -> Result<()> {
    contract!(
        model.landmark_count == config.landmarks && model.id_dims == config.id_dims && model.exp_dims == config.exp_dims,
        "morphable model ({} landmarks, {}+{} coefficients) does not match the network ({}, {}+{})",
        model.landmark_count,
        model.id_dims,
        model.exp_dims,
        config.landmarks,
        config.id_dims,
        config.exp_dims
    );
    Ok(())
}

/// Aligns one image: stack it with the mean map, run the network, read out
/// landmarks at every stage. No morphable-model evaluation happens here.
pub fn fast_forward<T: Scalar>(network: &FastDhmNetwork<T>, image: &Tensor<f64>, mean_map: &DiffusionHeatMap) -> Result<AlignmentResult> {
    let stack = build_input_stack(image, mean_map)?;
    let cache = network.forward_cached(&stack.data.cast())?;
    let size = network.config.image_size;
    let to_px = |v: &Vec<T>| pixel_landmarks(&v.iter().map(|x| x.as_f64()).collect::<Vec<_>>(), size);
    let initial = to_px(&cache.stage_outputs[0]);
    let stages: Vec<_> = cache.stage_outputs[1..].iter().map(to_px).collect();
    let mut stage_seconds = cache.stage_seconds[1..].to_vec();
    stage_seconds[0] += cache.stage_seconds[0];
    Ok(AlignmentResult {
        landmarks: stages.last().expect("at least one step").clone(),
        initial,
        stages,
        params: None,
        heatmaps: Vec::new(),
        stage_seconds,
        mult_adds: cache.mult_adds,
    })
}
