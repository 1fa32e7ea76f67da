use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor_nn::{cost_of, tanh_backward, Conv2d, ConvSpec, Scalar, Tensor};

/// Factorized recurrent cell over feature maps:
///
/// ```text
/// h_0     = W_init ⊗ F_0
/// Δ_t     = tanh(D_i ⊗ F_t + D_h ⊗ (W_hh ⊗ h_t))
/// F_{t+1} = F_t + Δ_t
/// h_{t+1} = Δ_t
/// ```
///
/// `D_i`, `D_h` are depthwise and `W_hh`, `W_init` pointwise; every branch
/// is stride 1 with "same" padding so the map shape never changes. No bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FastRecurrentCell<T = f64> {
    pub input_depthwise: Conv2d<T>,
    pub hidden_depthwise: Conv2d<T>,
    pub hidden_pointwise: Conv2d<T>,
    pub init_pointwise: Conv2d<T>,
}

impl<T: Scalar> FastRecurrentCell<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, kernel_size: usize, rng: &mut R) -> Self {
        let k2 = (kernel_size * kernel_size) as f64;
        let dw_limit = 0.5 / k2.sqrt();
        let pw_limit = (3.0 / channels as f64).sqrt();
        FastRecurrentCell {
            input_depthwise: Conv2d::init_uniform(ConvSpec::depthwise(kernel_size, channels, 1), false, dw_limit, rng),
            hidden_depthwise: Conv2d::init_uniform(ConvSpec::depthwise(kernel_size, channels, 1), false, dw_limit, rng),
            hidden_pointwise: Conv2d::init_uniform(ConvSpec::pointwise(channels, channels), false, pw_limit, rng),
            init_pointwise: Conv2d::init_uniform(ConvSpec::pointwise(channels, channels), false, pw_limit, rng),
        }
    }

    pub fn zeros(channels: usize, kernel_size: usize) -> Self {
        FastRecurrentCell {
            input_depthwise: Conv2d::zeros(ConvSpec::depthwise(kernel_size, channels, 1), false),
            hidden_depthwise: Conv2d::zeros(ConvSpec::depthwise(kernel_size, channels, 1), false),
            hidden_pointwise: Conv2d::zeros(ConvSpec::pointwise(channels, channels), false),
            init_pointwise: Conv2d::zeros(ConvSpec::pointwise(channels, channels), false),
        }
    }

    pub fn channels(&self) -> usize {
        self.input_depthwise.spec.in_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.input_depthwise.spec.kernel_size
    }

    pub fn layers(&self) -> [(&'static str, &Conv2d<T>); 4] {
        [
            ("rnn.init_pointwise", &self.init_pointwise),
            ("rnn.hidden_pointwise", &self.hidden_pointwise),
            ("rnn.hidden_depthwise", &self.hidden_depthwise),
            ("rnn.input_depthwise", &self.input_depthwise),
        ]
    }

    /// Weights used inside one recurrence step, `2·S_k²·C + C²`.
    pub fn recurrent_parameter_count(&self) -> u64 {
        [&self.input_depthwise, &self.hidden_depthwise, &self.hidden_pointwise]
            .iter()
            .map(|l| cost_of(&l.spec, 1).parameters)
            .sum()
    }

    /// `S_k²·C²` per convolution for a cell built from two standard convolutions.
    pub fn standard_equivalent_parameter_count(&self) -> u64 {
        let c = self.channels();
        2 * cost_of(&ConvSpec::standard(self.kernel_size(), c, c, 1), 1).parameters
    }

    pub fn zeros_like(&self) -> Self {
        FastRecurrentCell::zeros(self.channels(), self.kernel_size())
    }

    pub fn cast<U: Scalar>(&self) -> FastRecurrentCell<U> {
        FastRecurrentCell {
            input_depthwise: self.input_depthwise.cast(),
            hidden_depthwise: self.hidden_depthwise.cast(),
            hidden_pointwise: self.hidden_pointwise.cast(),
            init_pointwise: self.init_pointwise.cast(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        [&self.input_depthwise, &self.hidden_depthwise, &self.hidden_pointwise, &self.init_pointwise]
            .into_iter()
            .flat_map(Conv2d::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.input_depthwise.params_mut();
        p.extend(self.hidden_depthwise.params_mut());
        p.extend(self.hidden_pointwise.params_mut());
        p.extend(self.init_pointwise.params_mut());
        p
    }

    fn check(&self, t: &Tensor<T>) -> Result<()> {
        let (_, _, c) = t.hwc()?;
        contract!(
            c == self.channels(),
            "feature map has {c} channels, cell expects {}",
            self.channels()
        );
        Ok(())
    }
}

/// `(F_0, h_0) = (features, W_init ⊗ features)`.
pub fn fast_recurrent_init<T: Scalar>(cell: &FastRecurrentCell<T>, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    cell.check(features)?;
    let h0 = cell.init_pointwise.forward(features)?;
    Ok((features.clone(), h0))
}

/// One recurrence step; returns `(F_{t+1}, h_{t+1})`.
pub fn fast_recurrent_step<T: Scalar>(cell: &FastRecurrentCell<T>, f_t: &Tensor<T>, h_t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (f, h, _) = step_with_mix(cell, f_t, h_t)?;
    Ok((f, h))
}

fn step_with_mix<T: Scalar>(cell: &FastRecurrentCell<T>, f_t: &Tensor<T>, h_t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cell.check(f_t)?;
    contract!(
        f_t.shape() == h_t.shape(),
        "state shapes differ: {:?} vs {:?}",
        f_t.shape(),
        h_t.shape()
    );
    let mixed = cell.hidden_pointwise.forward(h_t)?;
    let mut pre = cell.hidden_depthwise.forward(&mixed)?;
    pre.add_assign(&cell.input_depthwise.forward(f_t)?)?;
    pre.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    let delta = pre;
    let mut f_next = f_t.clone();
    f_next.add_assign(&delta)?;
    Ok((f_next, delta, mixed))
}

/// All states of an unrolled [`FastRecurrentCell`].
#[derive(Clone, Debug, PartialEq)]
pub struct FastTrace<T = f64> {
    /// `F_0 ..= F_T`
    pub states: Vec<Tensor<T>>,
    /// `h_0 ..= h_T`; `h_{t+1}` is also the increment `Δ_t`.
    pub hidden: Vec<Tensor<T>>,
    /// `W_hh ⊗ h_t` for each step.
    pub mixed: Vec<Tensor<T>>,
}

impl<T: Scalar> FastTrace<T> {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &Tensor<T> {
        self.states.last().expect("trace has F_0")
    }
}

/// Runs `h_0` initialisation followed by `steps` recurrence steps.
pub fn unroll<T: Scalar>(cell: &FastRecurrentCell<T>, features: &Tensor<T>, steps: usize) -> Result<FastTrace<T>> {
    contract!(steps >= 1, "unroll needs at least one step");
    let (f0, h0) = fast_recurrent_init(cell, features)?;
    let mut trace = FastTrace {
        states: vec![f0],
        hidden: vec![h0],
        mixed: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let (f, h, m) = step_with_mix(cell, &trace.states[t], &trace.hidden[t])?;
        trace.states.push(f);
        trace.hidden.push(h);
        trace.mixed.push(m);
    }
    Ok(trace)
}

/// Backpropagation through time. `grad_states[t]` is the direct gradient
/// on `F_t`. Returns `dL/d(features)`.
pub fn backward<T: Scalar>(
    cell: &FastRecurrentCell<T>,
    trace: &FastTrace<T>,
    grad_states: &[Option<Tensor<T>>],
    grads: &mut FastRecurrentCell<T>,
) -> Result<Tensor<T>> {
    let steps = trace.steps();
    contract!(
        grad_states.len() == steps + 1,
        "need {} state gradients, got {}",
        steps + 1,
        grad_states.len()
    );
    let zeros = trace.states[0].zeros_like();
    let mut g_f = grad_states[steps].clone().unwrap_or_else(|| zeros.clone());
    let mut g_h = zeros.clone();
    for t in (0..steps).rev() {
        // F_{t+1} = F_t + Δ_t and h_{t+1} = Δ_t
        let mut g_delta = g_f.clone();
        g_delta.add_assign(&g_h)?;
        let g_pre = tanh_backward(&trace.hidden[t + 1], &g_delta)?;
        let g_from_input = cell.input_depthwise.backward(&trace.states[t], &g_pre, &mut grads.input_depthwise)?;
        let g_mixed = cell.hidden_depthwise.backward(&trace.mixed[t], &g_pre, &mut grads.hidden_depthwise)?;
        g_h = cell.hidden_pointwise.backward(&trace.hidden[t], &g_mixed, &mut grads.hidden_pointwise)?;
        g_f.add_assign(&g_from_input)?;
        if let Some(g) = &grad_states[t] {
            g_f.add_assign(g)?;
        }
    }
    let g_init = cell.init_pointwise.backward(&trace.states[0], &g_h, &mut grads.init_pointwise)?;
    g_f.add_assign(&g_init)?;
    Ok(g_f)
}
