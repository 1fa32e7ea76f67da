//! Shared oracles for the integration tests and the acceptance run.
#![allow(dead_code)]

use evodhm::alignment_pipeline::*;
use evodhm::diffusion_heatmap::DiffusionHeatMap;
use evodhm::evolutionary_rnn::*;
use evodhm::morphable_model::*;
use evodhm::tensor_nn::reference;
use evodhm::tensor_nn::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences of `loss_at(i, δ)` (the loss with coordinate `i`
/// moved by `δ`) against `analytic[i]` for every `i` in `indices`.
pub fn fd_compare(analytic: &[f64], indices: &[usize], mut loss_at: impl FnMut(usize, f64) -> f64) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    for &i in indices {
        let numeric = (loss_at(i, FD_STEP) - loss_at(i, -FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    (indices.len(), worst)
}

/// All of `0..n` when `n <= k`, otherwise `k` distinct random indices.
pub fn pick(n: usize, k: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut v = sample(r, n, k).into_vec();
    v.sort_unstable();
    v
}

pub fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, r)
}

/// Pushes entries away from zero so ReLU kinks stay out of the FD stencil.
pub fn off_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flat(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn nudge(params: Vec<&mut Tensor>, mut i: usize, d: f64) {
    for p in params {
        if i < p.len() {
            p.data_mut()[i] += d;
            return;
        }
        i -= p.len();
    }
    panic!("parameter index out of range");
}

/// Up to `per_tensor` random entries of every tensor, as flat indices.
fn per_tensor_indices(ts: &[&Tensor], per_tensor: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for t in ts {
        out.extend(pick(t.len(), per_tensor, r).into_iter().map(|i| i + offset));
        offset += t.len();
    }
    out
}

fn case(name: impl Into<String>, parts: &[(usize, f64)]) -> GradCase {
    GradCase {
        name: name.into(),
        checked: parts.iter().map(|p| p.0).sum(),
        max_rel: parts.iter().map(|p| p.1).fold(0.0, f64::max),
    }
}

pub fn grad_conv(mode: ConvMode, stride: usize, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let spec = match mode {
        ConvMode::Standard => ConvSpec::standard(3, 3, 4, stride),
        ConvMode::Depthwise => ConvSpec::depthwise(3, 3, stride),
        ConvMode::Pointwise => ConvSpec::pointwise(3, 4),
    };
    let mut layer = Conv2d::init(spec, true, &mut r);
    layer.bias = Some(uniform(&[spec.out_channels], &mut r));
    let x = uniform(&[5, 6, 3], &mut r);
    let y = layer.forward(&x).unwrap();
    let w = uniform(y.shape(), &mut r);
    let mut grads = layer.zeros_like();
    let gx = layer.backward(&x, &w, &mut grads).unwrap();
    let loss = |l: &Conv2d, x: &Tensor| dot(l.forward(x).unwrap().data(), w.data());
    let idx = pick(x.len(), 40, &mut r);
    let a = fd_compare(gx.data(), &idx, |i, d| {
        let mut x2 = x.clone();
        x2.data_mut()[i] += d;
        loss(&layer, &x2)
    });
    let ps = layer.params();
    let gp = flat(&grads.params());
    let idx = per_tensor_indices(&ps, 40, &mut r);
    let b = fd_compare(&gp, &idx, |i, d| {
        let mut l2 = layer.clone();
        nudge(l2.params_mut(), i, d);
        loss(&l2, &x)
    });
    case(format!("conv {} stride {stride}", mode.as_str()), &[a, b])
}

pub fn grad_linear(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let mut layer = Linear::init(7, 5, true, 0.5, &mut r);
    layer.bias = Some(uniform(&[5], &mut r));
    let x = uniform(&[7], &mut r).into_data();
    let w = uniform(&[5], &mut r).into_data();
    let mut grads = layer.zeros_like();
    let gx = layer.backward(&x, &w, &mut grads).unwrap();
    let loss = |l: &Linear, x: &[f64]| dot(&l.forward(x).unwrap(), &w);
    let a = fd_compare(&gx, &(0..7).collect::<Vec<_>>(), |i, d| {
        let mut x2 = x.clone();
        x2[i] += d;
        loss(&layer, &x2)
    });
    let gp = flat(&grads.params());
    let b = fd_compare(&gp, &(0..gp.len()).collect::<Vec<_>>(), |i, d| {
        let mut l2 = layer.clone();
        nudge(l2.params_mut(), i, d);
        loss(&l2, &x)
    });
    case("linear", &[a, b])
}

pub fn grad_activations(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let x = off_zero(uniform(&[3, 4, 2], &mut r));
    let w = uniform(&[3, 4, 2], &mut r);
    let all: Vec<usize> = (0..x.len()).collect();
    let shifted = |i: usize, d: f64| {
        let mut x2 = x.clone();
        x2.data_mut()[i] += d;
        x2
    };
    let g = relu_backward(&x, &w).unwrap();
    let relu = fd_compare(g.data(), &all, |i, d| dot(relu_forward(&shifted(i, d)).data(), w.data()));
    let g = tanh_backward(&tanh_forward(&x), &w).unwrap();
    let tanh = fd_compare(g.data(), &all, |i, d| dot(tanh_forward(&shifted(i, d)).data(), w.data()));
    vec![case("relu", &[relu]), case("tanh", &[tanh])]
}

pub fn grad_maxpool(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let mut parts = Vec::new();
    for (h, w) in [(6, 6), (5, 7)] {
        let x = uniform(&[h, w, 2], &mut r);
        let (y, cache) = maxpool_forward(&x, 2).unwrap();
        let wt = uniform(y.shape(), &mut r);
        let g = maxpool_backward(&cache, &wt).unwrap();
        let all: Vec<usize> = (0..x.len()).collect();
        parts.push(fd_compare(g.data(), &all, |i, d| {
            let mut x2 = x.clone();
            x2.data_mut()[i] += d;
            dot(maxpool_forward(&x2, 2).unwrap().0.data(), wt.data())
        }));
    }
    case("maxpool 2x2", &parts)
}

pub fn grad_projection(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let model = generate_synthetic_model(3, 12, 3, 2).unwrap();
    let mut p = model.default_pose(64);
    p.euler = EulerAngles::new(r.random_range(-0.3..0.3), r.random_range(-1.2..1.2), r.random_range(-0.3..0.3));
    p.id_coeffs.iter_mut().for_each(|c| *c = r.random_range(-1.0..1.0));
    p.exp_coeffs.iter_mut().for_each(|c| *c = r.random_range(-1.0..1.0));
    let w = uniform(&[24], &mut r).into_data();
    let g = model.project_vjp(&p, &w).unwrap();
    let v = p.to_vector();
    let a = fd_compare(&g, &(0..v.len()).collect::<Vec<_>>(), |i, d| {
        let mut v2 = v.clone();
        v2[i] += d;
        let p2 = PoseShapeParams::from_vector(&v2, 3, 2).unwrap();
        dot(&model.project_weak_perspective(&p2).unwrap().coords, &w)
    });
    case("weak-perspective projection", &[a])
}

pub fn grad_vanilla_cell(increment: IncrementSource, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let steps = 4;
    let cell = VanillaRnnCell::init(7, 6, 4, &mut r);
    let mut cell = cell;
    cell.w_ho = uniform(cell.w_ho.shape(), &mut r);
    let feats: Vec<Vec<f64>> = (0..steps).map(|_| uniform(&[7], &mut r).into_data()).collect();
    let p0 = uniform(&[4], &mut r).into_data();
    let ws: Vec<Vec<f64>> = (0..=steps).map(|_| uniform(&[4], &mut r).into_data()).collect();
    let loss = |c: &VanillaRnnCell, f: &[Vec<f64>]| {
        let tr = c.unroll(f, p0.clone(), increment).unwrap();
        tr.params[1..].iter().zip(&ws[1..]).map(|(p, w)| dot(p, w)).sum::<f64>()
    };
    let trace = cell.unroll(&feats, p0.clone(), increment).unwrap();
    let gp: Vec<Option<Vec<f64>>> = (0..=steps).map(|t| (t > 0).then(|| ws[t].clone())).collect();
    let mut grads = cell.zeros_like();
    let gx = cell.backward(&trace, &gp, &mut grads).unwrap();
    let gflat: Vec<f64> = gx.concat();
    let a = fd_compare(&gflat, &(0..gflat.len()).collect::<Vec<_>>(), |i, d| {
        let mut f2 = feats.clone();
        f2[i / 7][i % 7] += d;
        loss(&cell, &f2)
    });
    let gw = flat(&grads.params());
    let b = fd_compare(&gw, &(0..gw.len()).collect::<Vec<_>>(), |i, d| {
        let mut c2 = cell.clone();
        nudge(c2.params_mut(), i, d);
        loss(&c2, &feats)
    });
    let name = match increment {
        IncrementSource::Current => "vanilla cell T=4",
        IncrementSource::Next => "vanilla cell T=4 (next-state increment)",
    };
    case(name, &[a, b])
}

pub fn grad_fast_cell(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let steps = 4;
    let cell = FastRecurrentCell::init(3, 3, &mut r);
    let f0 = uniform(&[4, 4, 3], &mut r);
    let ws: Vec<Tensor> = (0..=steps).map(|_| uniform(&[4, 4, 3], &mut r)).collect();
    let loss = |c: &FastRecurrentCell, f: &Tensor| {
        let tr = fast_unroll(c, f, steps).unwrap();
        tr.states.iter().zip(&ws).map(|(s, w)| dot(s.data(), w.data())).sum::<f64>()
    };
    let trace = fast_unroll(&cell, &f0, steps).unwrap();
    let gs: Vec<Option<Tensor>> = ws.iter().cloned().map(Some).collect();
    let mut grads = cell.zeros_like();
    let gf = fast_backward(&cell, &trace, &gs, &mut grads).unwrap();
    let a = fd_compare(gf.data(), &(0..f0.len()).collect::<Vec<_>>(), |i, d| {
        let mut f2 = f0.clone();
        f2.data_mut()[i] += d;
        loss(&cell, &f2)
    });
    let gw = flat(&grads.params());
    let b = fd_compare(&gw, &(0..gw.len()).collect::<Vec<_>>(), |i, d| {
        let mut c2 = cell.clone();
        nudge(c2.params_mut(), i, d);
        loss(&c2, &f0)
    });
    case("fast recurrent cell T=4", &[a, b])
}

/// Small model, dataset configuration and one sample for end-to-end checks.
pub fn tiny_setup(size: usize, seed: u64) -> (MorphableModel, DatasetConfig, Sample) {
    let dcfg = DatasetConfig {
        image_size: size,
        landmarks: 10,
        id_dims: 2,
        exp_dims: 1,
        ..DatasetConfig::default()
    };
    let model = generate_synthetic_model(dcfg.model_seed, 10, 2, 1).unwrap();
    let s = generate_synthetic_dataset(&model, 1, seed, &dcfg).unwrap().samples.remove(0);
    (model, dcfg, s)
}

pub fn tiny_pipeline(variant: Variant, size: usize) -> PipelineConfig {
    PipelineConfig {
        variant,
        image_size: size,
        landmarks: 10,
        id_dims: 2,
        exp_dims: 1,
        hidden_dim: 12,
        stage_loss_weight: 0.5,
        ..PipelineConfig::default()
    }
}

pub fn grad_fast_network(seed: u64) -> GradCase {
    let mut r = rng(seed);
    let (model, _, smp) = tiny_setup(32, seed);
    let cfg = tiny_pipeline(Variant::FastDhm, 32);
    let mut net = FastDhmNetwork::new(cfg.clone(), &model, seed).unwrap();
    net.head.weight = Tensor::random_uniform(net.head.weight.shape(), -0.05, 0.05, &mut r);
    // zero biases over all-zero ReLU patches sit exactly on the kink
    let convs = std::iter::once(&mut net.stem).chain(net.blocks.iter_mut().flat_map(|b| [&mut b.depthwise, &mut b.pointwise]));
    for c in convs {
        let b = c.bias.as_mut().expect("fast convs have biases");
        *b = Tensor::random_uniform(b.shape(), -0.1, 0.1, &mut r);
    }
    let net = Network::Fast(net);
    let ctx = AlignmentContext::new(&model, &cfg).unwrap();
    let target = normalized_landmarks(&smp.landmarks_2d(), 32);
    let sg = net.sample_gradient(&ctx, &smp.image, &target).unwrap();
    let gp = flat(&sg.grads.params());
    let idx = per_tensor_indices(&net.params(), 8, &mut r);
    let a = fd_compare(&gp, &idx, |i, d| {
        let mut n2 = net.clone();
        nudge(n2.params_mut(), i, d);
        n2.sample_gradient(&ctx, &smp.image, &target).unwrap().loss
    });
    case("fast network end to end", &[a])
}

/// Stage-weighted loss and parameter gradient of a classic network with
/// the heat maps replayed from `maps`.
fn classic_frozen(
    n: &ClassicDhmNetwork,
    model: &MorphableModel,
    smp: &Sample,
    p0: &PoseShapeParams,
    maps: &[DiffusionHeatMap],
    target: &[f64],
) -> (f64, ClassicDhmNetwork) {
    let size = n.config.image_size;
    let cache = n.forward_cached(model, &smp.image, p0, Some(maps)).unwrap();
    let steps = cache.states.len() - 1;
    let mut loss = 0.0;
    let mut gq = vec![None];
    for t in 1..=steps {
        let w = stage_weight(&n.config, t, steps);
        let u = normalized_landmarks(&n.state_landmarks(model, &cache.states[t]).unwrap(), size);
        let diff: Vec<f64> = u.iter().zip(target).map(|(a, b)| a - b).collect();
        loss += w * dot(&diff, &diff);
        let gu: Vec<f64> = diff.iter().map(|d| 2.0 * w * d).collect();
        gq.push(Some(n.state_vjp(model, &cache.states[t], &gu).unwrap()));
    }
    let mut grads = n.zeros_like();
    n.backward(&cache, &gq, &mut grads).unwrap();
    (loss, grads)
}

pub fn grad_classic_network(ablation: Ablation, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let (model, _, smp) = tiny_setup(32, seed);
    let cfg = PipelineConfig {
        ablation,
        ..tiny_pipeline(Variant::ClassicDhm, 32)
    };
    let mut net = ClassicDhmNetwork::new(cfg.clone(), &model, seed).unwrap();
    net.rnn.w_ho = Tensor::random_uniform(net.rnn.w_ho.shape(), -0.05, 0.05, &mut r);
    let ctx = AlignmentContext::new(&model, &cfg).unwrap();
    let maps = net.forward_cached(&model, &smp.image, &ctx.initial_params, None).unwrap().heatmaps;
    let target = normalized_landmarks(&smp.landmarks_2d(), 32);
    let (_, grads) = classic_frozen(&net, &model, &smp, &ctx.initial_params, &maps, &target);
    let gp = flat(&grads.params());
    let idx = per_tensor_indices(&net.params(), 8, &mut r);
    let a = fd_compare(&gp, &idx, |i, d| {
        let mut n2 = net.clone();
        nudge(n2.params_mut(), i, d);
        classic_frozen(&n2, &model, &smp, &ctx.initial_params, &maps, &target).0
    });
    let name = match ablation {
        Ablation::None => "classic network end to end (frozen heat maps)".to_string(),
        other => format!("classic network end to end, {}", other.as_str()),
    };
    case(name, &[a])
}

pub fn gradient_suite() -> Vec<GradCase> {
    let mut out = Vec::new();
    for (i, mode) in [ConvMode::Standard, ConvMode::Depthwise, ConvMode::Pointwise].into_iter().enumerate() {
        out.push(grad_conv(mode, 1, 10 + i as u64));
        if mode != ConvMode::Pointwise {
            out.push(grad_conv(mode, 2, 20 + i as u64));
        }
    }
    out.push(grad_linear(30));
    out.extend(grad_activations(31));
    out.push(grad_maxpool(32));
    out.push(grad_projection(33));
    out.push(grad_vanilla_cell(IncrementSource::Current, 34));
    out.push(grad_vanilla_cell(IncrementSource::Next, 35));
    out.push(grad_fast_cell(36));
    out.push(grad_fast_network(37));
    out.push(grad_classic_network(Ablation::None, 38));
    out.push(grad_classic_network(Ablation::NoHeatmap2dRnn, 39));
    out
}

/// Production convolution against the scalar-loop reference on random
/// shapes; returns the number of cases and the worst relative error.
pub fn kernel_oracle(cases_per_mode: usize, seed: u64) -> (usize, f64) {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for mode in [ConvMode::Standard, ConvMode::Depthwise, ConvMode::Pointwise] {
        for _ in 0..cases_per_mode {
            let k = [1, 3, 5][r.random_range(0..3)];
            let stride = r.random_range(1..=2);
            let cin = r.random_range(1..=6);
            let cout = r.random_range(1..=6);
            let spec = match mode {
                ConvMode::Standard => ConvSpec::standard(k, cin, cout, stride),
                ConvMode::Depthwise => ConvSpec::depthwise(k, cin, stride),
                ConvMode::Pointwise => ConvSpec::pointwise(cin, cout),
            };
            let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
            let x = uniform(&[h, w, cin], &mut r);
            let wt = uniform(&spec.weight_shape(), &mut r);
            let fast = conv2d_forward(&x, &spec, &wt).unwrap();
            let slow = reference::conv2d(&x, &spec, &wt).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            let scale = slow.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            let diff = fast.data().iter().zip(slow.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(diff / scale);
            n += 1;
        }
    }
    (n, worst)
}

/// `cost_of` against the counting reference on random stride-1 specs, and
/// the separable ratio against `1/C_out + 1/9` for the given widths.
pub fn cost_exactness(cases: usize, widths: &[usize], seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for c in 0..cases {
        let k = [1, 3, 5][r.random_range(0..3)];
        let cin = r.random_range(1..=8);
        let cout = r.random_range(1..=8);
        let spec = match c % 3 {
            0 => ConvSpec::standard(k, cin, cout, 1),
            1 => ConvSpec::depthwise(k, cin, 1),
            _ => ConvSpec::pointwise(cin, cout),
        };
        let sf = r.random_range(1..=8);
        let x = uniform(&[sf, sf, cin], &mut r);
        let wt = uniform(&spec.weight_shape(), &mut r);
        let (_, macs) = reference::conv2d_counting(&x, &spec, &wt).unwrap();
        let cost = cost_of(&spec, sf);
        if cost.mult_adds != macs || cost.parameters != wt.len() as u64 {
            return Err(format!("{spec:?} at {sf}: model {cost:?}, counted {macs} MACs / {} weights", wt.len()));
        }
    }
    for &c in widths {
        let std = ConvSpec::standard(3, c, c, 1);
        let (dw, pw) = separable_pair(&std);
        let sf = 7;
        let sep = cost_of(&dw, sf).mult_adds + cost_of(&pw, sf).mult_adds;
        let full = cost_of(&std, sf).mult_adds;
        let c = c as u64;
        // sep / full == 1/c + 1/9  <=>  9c·sep == (9 + c)·full
        if 9 * c * sep != (9 + c) * full {
            return Err(format!("C_out={c}: {sep}/{full} is not 1/{c} + 1/9"));
        }
        let q = separable_reduction_ratio(&std);
        if q.numer * 9 * c != q.denom * (9 + c) {
            return Err(format!("C_out={c}: separable_reduction_ratio gave {q}"));
        }
    }
    Ok(())
}
