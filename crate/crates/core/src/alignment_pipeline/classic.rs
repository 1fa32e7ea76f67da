use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::config::{Ablation, PipelineConfig, Variant};
use super::dataset::{denormalize_coord, normalize_coord};
use super::fast::{centre_input, check_model, INPUT_CHANNELS};
use super::AlignmentResult;
use crate::diffusion_heatmap::{build_input_stack, heatmap_for_params, location_heatmap, DiffusionHeatMap};
use crate::error::{contract, Error, Result};
use crate::evolutionary_rnn::{IncrementSource, VanillaRnnCell, VanillaTrace};
use crate::morphable_model::{Landmarks2D, MorphableModel, PoseShapeParams};
use crate::serialization::{ChunkFile, DType};
use crate::tensor_nn::{
    cost_of_dense, cost_of_rect, maxpool_backward, maxpool_forward, relu_backward, relu_forward, Conv2d, ConvSpec,
    CostReport, LayerCost, MaxPoolCache, Scalar, Tensor,
};

/// Classic DHM: a plain conv/ReLU/max-pool stack reads the image stacked
/// with the current heat map, and a vanilla RNN moves the state (model
/// parameters, or 3L landmark coordinates for the 2D ablation).
///
/// The RNN works on `q = (s − state_ref) / state_scale` so that every state
/// entry has a comparable range.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassicDhmNetwork<T = f64> {
    pub config: PipelineConfig,
    pub convs: Vec<Conv2d<T>>,
    pub rnn: VanillaRnnCell<T>,
    pub state_ref: Vec<f64>,
    pub state_scale: Vec<f64>,
}

struct CnnCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    pools: Vec<MaxPoolCache>,
}

pub struct ClassicCache<T = f64> {
    cnn: Vec<CnnCache<T>>,
    pub trace: VanillaTrace<T>,
    /// States `s_0 ..= s_T` in physical units.
    pub states: Vec<Vec<f64>>,
    /// The heat map fed to each iteration.
    pub heatmaps: Vec<DiffusionHeatMap>,
    pub mult_adds: u64,
    pub stage_seconds: Vec<f64>,
}

pub fn classic_cnn_specs(cfg: &PipelineConfig) -> Vec<ConvSpec> {
    let mut cin = INPUT_CHANNELS;
    cfg.classic_channels
        .iter()
        .map(|&c| {
            let cout = c * cfg.width_multiplier;
            let s = ConvSpec::standard(cfg.kernel_size, cin, cout, 1);
            cin = cout;
            s
        })
        .collect()
}

fn state_reference(config: &PipelineConfig, model: &MorphableModel) -> Result<(Vec<f64>, Vec<f64>)> {
    let size = config.image_size as f64;
    let pose = model.default_pose(config.image_size);
    match config.ablation {
        Ablation::NoHeatmap2dRnn => {
            let posed = model.posed_shape(&pose)?;
            let l = model.landmark_count;
            let mut r: Vec<f64> = posed.coords[..2 * l]
                .iter()
                .map(|&v| normalize_coord(v, config.image_size))
                .collect();
            r.extend(posed.coords[2 * l..].iter().map(|&z| z / size));
            Ok((r, vec![0.1; 3 * l]))
        }
        _ => {
            let mut scale = vec![0.15 * pose.scale, 0.2, 0.8, 0.2, 0.1 * size, 0.1 * size];
            scale.extend(std::iter::repeat_n(1.0, model.id_dims + model.exp_dims));
            Ok((pose.to_vector(), scale))
        }
    }
}

impl<T: Scalar> ClassicDhmNetwork<T> {
    pub fn new(config: PipelineConfig, model: &MorphableModel, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, model, &mut rng)
    }

    /// Random CNN and RNN weights with `W_ho = 0`, so the untrained network
    /// leaves the initial state in place.
    pub fn init<R: Rng + ?Sized>(config: PipelineConfig, model: &MorphableModel, rng: &mut R) -> Result<Self> {
        config.validate()?;
        contract!(
            config.variant == Variant::ClassicDhm,
            "configuration is not a classic_dhm configuration"
        );
        check_model(&config, model)?;
        let convs = classic_cnn_specs(&config)
            .into_iter()
            .map(|s| Conv2d::init(s, true, rng))
            .collect();
        let (state_ref, state_scale) = state_reference(&config, model)?;
        let fs = config.image_size / config.classic_downsampling();
        let feat = fs * fs * config.classic_channels.last().expect("validated") * config.width_multiplier;
        let mut rnn = VanillaRnnCell::init(feat, config.hidden_dim, state_ref.len(), rng);
        rnn.w_ho.fill(T::zero());
        if config.ablation == Ablation::NoRecurrence3dCnn {
            rnn.initial_hidden.fill(T::zero());
        }
        Ok(ClassicDhmNetwork {
            config,
            convs,
            rnn,
            state_ref,
            state_scale,
        })
    }

    pub fn increment(&self) -> IncrementSource {
        match self.config.ablation {
            Ablation::NoRecurrence3dCnn => IncrementSource::Next,
            _ => self.config.increment,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_ref.len()
    }

    fn cnn_forward(&self, stack: Tensor<T>) -> Result<(Vec<T>, CnnCache<T>, u64)> {
        let mut cache = CnnCache {
            inputs: Vec::with_capacity(self.convs.len()),
            pre: Vec::with_capacity(self.convs.len()),
            pools: Vec::with_capacity(self.convs.len()),
        };
        let mut macs = 0;
        let mut x = stack;
        for conv in &self.convs {
            let pre = conv.forward(&x)?;
            macs += cost_of_rect(&conv.spec, pre.shape()[0], pre.shape()[1]).mult_adds;
            let (pooled, pc) = maxpool_forward(&relu_forward(&pre), 2)?;
            cache.inputs.push(std::mem::replace(&mut x, pooled));
            cache.pre.push(pre);
            cache.pools.push(pc);
        }
        Ok((x.into_data(), cache, macs))
    }

    fn cnn_backward(&self, cache: &CnnCache<T>, grad: Vec<T>, grads: &mut ClassicDhmNetwork<T>) -> Result<()> {
        let last = cache.pools.last().expect("non-empty CNN");
        let mut shape = last.input_shape.clone();
        shape[0] /= 2;
        shape[1] /= 2;
        let mut g = Tensor::from_vec(&shape, grad)?;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            g = maxpool_backward(&cache.pools[i], &g)?;
            g = relu_backward(&cache.pre[i], &g)?;
            g = conv.backward(&cache.inputs[i], &g, &mut grads.convs[i])?;
        }
        Ok(())
    }

    /// Physical state to normalized RNN state.
    pub fn to_q(&self, s: &[f64]) -> Vec<T> {
        s.iter()
            .zip(&self.state_ref)
            .zip(&self.state_scale)
            .map(|((&v, &r), &k)| T::of((v - r) / k))
            .collect()
    }

    pub fn from_q(&self, q: &[T]) -> Vec<f64> {
        q.iter()
            .zip(&self.state_ref)
            .zip(&self.state_scale)
            .map(|((&v, &r), &k)| r + k * v.as_f64())
            .collect()
    }

    pub fn initial_state(&self, model: &MorphableModel, p0: &PoseShapeParams) -> Result<Vec<f64>> {
        match self.config.ablation {
            Ablation::NoHeatmap2dRnn => {
                let posed = model.posed_shape(p0)?;
                let l = model.landmark_count;
                let mut s: Vec<f64> = posed.coords[..2 * l]
                    .iter()
                    .map(|&v| normalize_coord(v, self.config.image_size))
                    .collect();
                s.extend(posed.coords[2 * l..].iter().map(|&z| z / self.config.image_size as f64));
                Ok(s)
            }
            _ => Ok(p0.to_vector()),
        }
    }

    pub fn state_params(&self, model: &MorphableModel, s: &[f64]) -> Result<PoseShapeParams> {
        PoseShapeParams::from_vector(s, model.id_dims, model.exp_dims)
    }

    /// Pixel landmarks encoded by a physical state.
    pub fn state_landmarks(&self, model: &MorphableModel, s: &[f64]) -> Result<Landmarks2D> {
        match self.config.ablation {
            Ablation::NoHeatmap2dRnn => {
                let l = model.landmark_count;
                Ok(Landmarks2D {
                    coords: s[..2 * l]
                        .iter()
                        .map(|&u| denormalize_coord(u, self.config.image_size))
                        .collect(),
                })
            }
            _ => model.project_weak_perspective(&self.state_params(model, s)?),
        }
    }

    /// `dL/dq` from `dL/du`, the gradient on the 2L normalized landmarks of state `s`.
    pub fn state_vjp(&self, model: &MorphableModel, s: &[f64], grad_u: &[f64]) -> Result<Vec<T>> {
        let mut gs = match self.config.ablation {
            Ablation::NoHeatmap2dRnn => {
                let mut g = grad_u.to_vec();
                g.resize(s.len(), 0.0);
                g
            }
            _ => {
                let inv = 1.0 / self.config.image_size as f64;
                let gx: Vec<f64> = grad_u.iter().map(|g| g * inv).collect();
                model.project_vjp(&self.state_params(model, s)?, &gx)?
            }
        };
        for (g, k) in gs.iter_mut().zip(&self.state_scale) {
            *g *= k;
        }
        Ok(gs.into_iter().map(T::of).collect())
    }

    /// Runs the iterations of the evolutionary loop. `frozen_maps` replays
    /// given heat maps instead of regenerating them.
    pub fn forward_cached(
        &self,
        model: &MorphableModel,
        image: &Tensor<f64>,
        p0: &PoseShapeParams,
        frozen_maps: Option<&[DiffusionHeatMap]>,
    ) -> Result<ClassicCache<T>> {
        check_model(&self.config, model)?;
        let size = self.config.image_size;
        let (h, w, _) = image.hwc()?;
        contract!((h, w) == (size, size), "image is {h}×{w}, network expects {size}×{size}");
        let steps = self.config.effective_steps();
        if let Some(maps) = frozen_maps {
            contract!(maps.len() == steps, "need {steps} frozen heat maps, got {}", maps.len());
        }
        let s0 = self.initial_state(model, p0)?;
        let location_map = match self.config.ablation {
            Ablation::NoHeatmap2dRnn if frozen_maps.is_none() => Some(location_heatmap(
                &self.state_landmarks(model, &s0)?,
                (size, size),
                self.config.sigma,
            )?),
            _ => None,
        };
        let mut trace = self.rnn.start(self.to_q(&s0), self.increment());
        let mut states = vec![s0];
        let mut cnn = Vec::with_capacity(steps);
        let mut heatmaps = Vec::with_capacity(steps);
        let mut macs = 0;
        let mut stage_seconds = Vec::with_capacity(steps);
        for t in 0..steps {
            let start = Instant::now();
            let map = match (frozen_maps, &location_map) {
                (Some(maps), _) => maps[t].clone(),
                (None, Some(m)) => m.clone(),
                (None, None) => heatmap_for_params(
                    model,
                    &self.state_params(model, &states[t])?,
                    (size, size),
                    self.config.sigma,
                )?,
            };
            let stack = build_input_stack(image, &map)?;
            let (features, cache, m) = self.cnn_forward(centre_input(&stack.data.cast()))?;
            macs += m;
            self.rnn.advance(&mut trace, features)?;
            macs += (self.rnn.w_ih.len() + self.rnn.w_hh.len() + self.rnn.w_ho.len()) as u64;
            states.push(self.from_q(trace.params.last().expect("advanced")));
            cnn.push(cache);
            heatmaps.push(map);
            stage_seconds.push(start.elapsed().as_secs_f64());
        }
        Ok(ClassicCache {
            cnn,
            trace,
            states,
            heatmaps,
            mult_adds: macs,
            stage_seconds,
        })
    }

    /// `grad_q[t]` is `dL/dq_t` for `t = 0..=T`.
    pub fn backward(&self, cache: &ClassicCache<T>, grad_q: &[Option<Vec<T>>], grads: &mut ClassicDhmNetwork<T>) -> Result<()> {
        let gx = self.rnn.backward(&cache.trace, grad_q, &mut grads.rnn)?;
        for (c, g) in cache.cnn.iter().zip(gx) {
            self.cnn_backward(c, g, grads)?;
        }
        Ok(())
    }

    /// Every layer once, mult-adds summed over the `T` iterations.
    pub fn cost_table(&self) -> Vec<LayerCost> {
        let steps = self.config.effective_steps() as u64;
        let mut rows = Vec::new();
        let mut size = self.config.image_size;
        for (i, conv) in self.convs.iter().enumerate() {
            let c = cost_of_rect(&conv.spec, size, size);
            rows.push(LayerCost::new(
                format!("conv{}", i + 1),
                conv.spec.mode.as_str(),
                CostReport {
                    mult_adds: c.mult_adds * steps,
                    parameters: c.parameters,
                },
            ));
            size /= 2;
        }
        for (name, w) in [("rnn.w_ih", &self.rnn.w_ih), ("rnn.w_hh", &self.rnn.w_hh), ("rnn.w_ho", &self.rnn.w_ho)] {
            let c = cost_of_dense(w.shape()[1], w.shape()[0]);
            rows.push(LayerCost::new(
                name,
                "dense",
                CostReport {
                    mult_adds: c.mult_adds * steps,
                    parameters: c.parameters,
                },
            ));
        }
        rows
    }

    pub fn zeros_like(&self) -> Self {
        ClassicDhmNetwork {
            config: self.config.clone(),
            convs: self.convs.iter().map(Conv2d::zeros_like).collect(),
            rnn: self.rnn.zeros_like(),
            state_ref: self.state_ref.clone(),
            state_scale: self.state_scale.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ClassicDhmNetwork<U> {
        ClassicDhmNetwork {
            config: self.config.clone(),
            convs: self.convs.iter().map(Conv2d::cast).collect(),
            rnn: self.rnn.cast(),
            state_ref: self.state_ref.clone(),
            state_scale: self.state_scale.clone(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p: Vec<_> = self.convs.iter().flat_map(Conv2d::params).collect();
        p.extend(self.rnn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p: Vec<_> = self.convs.iter_mut().flat_map(Conv2d::params_mut).collect();
        p.extend(self.rnn.params_mut());
        p
    }

    pub fn to_chunk_file(&self, dtype: DType) -> ChunkFile {
        let mut f = ChunkFile::new("classic_dhm", json!({"config": self.config, "cell": "vanilla"}));
        for (i, c) in self.convs.iter().enumerate() {
            f.push_tensor(format!("conv{}.weight", i + 1), &c.weight, dtype);
            if let Some(b) = &c.bias {
                f.push_tensor(format!("conv{}.bias", i + 1), b, dtype);
            }
        }
        f.push_tensor("rnn.w_ih", &self.rnn.w_ih, dtype);
        f.push_tensor("rnn.w_hh", &self.rnn.w_hh, dtype);
        f.push_tensor("rnn.w_ho", &self.rnn.w_ho, dtype);
        f.push_tensor("rnn.initial_hidden", &self.rnn.initial_hidden, dtype);
        f.push_raw("state.ref", &[self.state_ref.len()], self.state_ref.clone());
        f.push_raw("state.scale", &[self.state_scale.len()], self.state_scale.clone());
        f
    }

    pub fn from_chunk_file(f: &ChunkFile) -> Result<Self> {
        f.expect_kind("classic_dhm")?;
        let config: PipelineConfig = serde_json::from_value(f.meta["config"].clone())
            .map_err(|e| Error::Data(format!("classic_dhm metadata: {e}")))?;
        config.validate().map_err(|e| Error::Data(e.to_string()))?;
        let mut convs = Vec::new();
        for (i, spec) in classic_cnn_specs(&config).into_iter().enumerate() {
            let weight = f.tensor(&format!("conv{}.weight", i + 1))?;
            if weight.shape() != spec.weight_shape().as_slice() {
                return Err(Error::Data(format!("conv{} weight has shape {:?}", i + 1, weight.shape())));
            }
            convs.push(Conv2d {
                spec,
                weight,
                bias: Some(f.tensor(&format!("conv{}.bias", i + 1))?),
            });
        }
        let rnn = VanillaRnnCell {
            w_ih: f.tensor("rnn.w_ih")?,
            w_hh: f.tensor("rnn.w_hh")?,
            w_ho: f.tensor("rnn.w_ho")?,
            initial_hidden: f.tensor("rnn.initial_hidden")?,
        };
        let state_ref = f.chunk("state.ref")?.data.clone();
        let state_scale = f.chunk("state.scale")?.data.clone();
        let h = rnn.hidden_dim();
        if rnn.w_ih.shape()[0] != h
            || rnn.w_ho.shape() != [state_ref.len(), h]
            || rnn.initial_hidden.len() != h
            || state_scale.len() != state_ref.len()
        {
            return Err(Error::Data("inconsistent recurrent weight shapes".into()));
        }
        Ok(ClassicDhmNetwork {
            config,
            convs,
            rnn,
            state_ref,
            state_scale,
        })
    }
}

/// Runs the evolutionary loop from `p0` and reads the landmarks of every state.
pub fn classic_forward<T: Scalar>(
    network: &ClassicDhmNetwork<T>,
    model: &MorphableModel,
    image: &Tensor<f64>,
    p0: &PoseShapeParams,
) -> Result<AlignmentResult> {
    let cache = network.forward_cached(model, image, p0, None)?;
    let initial = network.state_landmarks(model, &cache.states[0])?;
    let stages = cache.states[1..]
        .iter()
        .map(|s| network.state_landmarks(model, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentResult {
        landmarks: stages.last().expect("at least one step").clone(),
        initial,
        stages,
        params: Some(cache.states),
        heatmaps: cache.heatmaps,
        stage_seconds: cache.stage_seconds,
        mult_adds: cache.mult_adds,
    })
}
