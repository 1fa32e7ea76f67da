use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor_nn::{fully_connected_forward, Scalar, Tensor};

/// Which hidden state drives the parameter increment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementSource {
    /// `p_{t+1} = p_t + W_ho·h_t`
    #[default]
    Current,
    /// `p_{t+1} = p_t + W_ho·h_{t+1}`
    Next,
}

/// Parameter-space recurrent regressor:
///
/// ```text
/// h_{t+1} = tanh(W_ih·x_t + W_hh·h_t)
/// p_{t+1} = p_t + W_ho·h_t
/// ```
///
/// `initial_hidden` is the learned `h_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaRnnCell<T = f64> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub w_ho: Tensor<T>,
    pub initial_hidden: Tensor<T>,
}

impl<T: Scalar> VanillaRnnCell<T> {
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, hidden_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let lim_ih = (3.0 / feature_dim as f64).sqrt();
        let lim_hh = 0.5 / (hidden_dim as f64).sqrt();
        let lim_ho = 0.1 / (hidden_dim as f64).sqrt();
        VanillaRnnCell {
            w_ih: Tensor::random_uniform(&[hidden_dim, feature_dim], -lim_ih, lim_ih, rng),
            w_hh: Tensor::random_uniform(&[hidden_dim, hidden_dim], -lim_hh, lim_hh, rng),
            w_ho: Tensor::random_uniform(&[output_dim, hidden_dim], -lim_ho, lim_ho, rng),
            initial_hidden: Tensor::random_uniform(&[hidden_dim], -0.1, 0.1, rng),
        }
    }

    pub fn zeros(feature_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        VanillaRnnCell {
            w_ih: Tensor::zeros(&[hidden_dim, feature_dim]),
            w_hh: Tensor::zeros(&[hidden_dim, hidden_dim]),
            w_ho: Tensor::zeros(&[output_dim, hidden_dim]),
            initial_hidden: Tensor::zeros(&[hidden_dim]),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w_ho.shape()[0]
    }

    /// Weight count excluding `h_0`.
    pub fn parameter_count(&self) -> usize {
        self.w_ih.len() + self.w_hh.len() + self.w_ho.len()
    }

    pub fn step(&self, features: &[T], h_t: &[T], p_t: &[T], increment: IncrementSource) -> Result<(Vec<T>, Vec<T>)> {
        contract!(
            features.len() == self.feature_dim(),
            "feature length {} does not match cell input {}",
            features.len(),
            self.feature_dim()
        );
        contract!(h_t.len() == self.hidden_dim(), "hidden state has wrong length");
        contract!(
            p_t.len() == self.output_dim(),
            "parameter vector length {} does not match cell output {}",
            p_t.len(),
            self.output_dim()
        );
        let a = fully_connected_forward(&self.w_ih, None, features)?;
        let b = fully_connected_forward(&self.w_hh, None, h_t)?;
        let h_next: Vec<T> = a.iter().zip(&b).map(|(&x, &y)| (x + y).tanh()).collect();
        let driver = match increment {
            IncrementSource::Current => h_t,
            IncrementSource::Next => &h_next,
        };
        let dp = fully_connected_forward(&self.w_ho, None, driver)?;
        let p_next = p_t.iter().zip(&dp).map(|(&p, &d)| p + d).collect();
        Ok((h_next, p_next))
    }

    /// Appends one step to `trace` using `features` as `x_t`.
    pub fn advance(&self, trace: &mut VanillaTrace<T>, features: Vec<T>) -> Result<()> {
        let (h, p) = self.step(
            &features,
            trace.hidden.last().expect("trace has h_0"),
            trace.params.last().expect("trace has p_0"),
            trace.increment,
        )?;
        trace.features.push(features);
        trace.hidden.push(h);
        trace.params.push(p);
        Ok(())
    }

    pub fn start(&self, p0: Vec<T>, increment: IncrementSource) -> VanillaTrace<T> {
        VanillaTrace {
            features: Vec::new(),
            hidden: vec![self.initial_hidden.data().to_vec()],
            params: vec![p0],
            increment,
        }
    }

    /// Runs one step per entry of `features`.
    pub fn unroll(&self, features: &[Vec<T>], p0: Vec<T>, increment: IncrementSource) -> Result<VanillaTrace<T>> {
        contract!(!features.is_empty(), "unroll needs at least one step");
        let mut trace = self.start(p0, increment);
        for x in features {
            self.advance(&mut trace, x.clone())?;
        }
        Ok(trace)
    }

    /// Backpropagation through time.
    ///
    /// `grad_params[t]` is the direct loss gradient w.r.t. `p_t`
    /// (`t = 0..=T`; `None` means zero). Parameter gradients accumulate into
    /// `grads`; the return value holds `dL/dx_t` for every step.
    pub fn backward(&self, trace: &VanillaTrace<T>, grad_params: &[Option<Vec<T>>], grads: &mut VanillaRnnCell<T>) -> Result<Vec<Vec<T>>> {
        let steps = trace.steps();
        contract!(
            grad_params.len() == steps + 1,
            "need {} parameter gradients, got {}",
            steps + 1,
            grad_params.len()
        );
        let (hd, fd, od) = (self.hidden_dim(), self.feature_dim(), self.output_dim());
        let mut gh = vec![vec![T::zero(); hd]; steps + 1];
        let mut gx = vec![vec![T::zero(); fd]; steps];
        let mut gp = vec![T::zero(); od];
        if let Some(g) = &grad_params[steps] {
            gp.clone_from(g);
        }
        for t in (0..steps).rev() {
            // increment p_{t+1} = p_t + W_ho·h_s
            let s = match trace.increment {
                IncrementSource::Current => t,
                IncrementSource::Next => t + 1,
            };
            let h_s = &trace.hidden[s];
            for o in 0..od {
                let g = gp[o];
                let row = &self.w_ho.data()[o * hd..][..hd];
                let grow = &mut grads.w_ho.data_mut()[o * hd..][..hd];
                for j in 0..hd {
                    grow[j] += g * h_s[j];
                    gh[s][j] += g * row[j];
                }
            }
            // recurrence h_{t+1} = tanh(W_ih·x_t + W_hh·h_t)
            let h_next = &trace.hidden[t + 1];
            let da: Vec<T> = gh[t + 1]
                .iter()
                .zip(h_next)
                .map(|(&g, &h)| g * (T::one() - h * h))
                .collect();
            let x = &trace.features[t];
            let h_t = &trace.hidden[t];
            for (j, &d) in da.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                let wrow = &self.w_ih.data()[j * fd..][..fd];
                let grow = &mut grads.w_ih.data_mut()[j * fd..][..fd];
                for i in 0..fd {
                    grow[i] += d * x[i];
                    gx[t][i] += d * wrow[i];
                }
                let wrow = &self.w_hh.data()[j * hd..][..hd];
                let grow = &mut grads.w_hh.data_mut()[j * hd..][..hd];
                for i in 0..hd {
                    grow[i] += d * h_t[i];
                    gh[t][i] += d * wrow[i];
                }
            }
            if let Some(g) = &grad_params[t] {
                for (a, &b) in gp.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        for (a, &b) in grads.initial_hidden.data_mut().iter_mut().zip(&gh[0]) {
            *a += b;
        }
        Ok(gx)
    }

    pub fn zeros_like(&self) -> Self {
        VanillaRnnCell::zeros(self.feature_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn cast<U: Scalar>(&self) -> VanillaRnnCell<U> {
        VanillaRnnCell {
            w_ih: self.w_ih.cast(),
            w_hh: self.w_hh.cast(),
            w_ho: self.w_ho.cast(),
            initial_hidden: self.initial_hidden.cast(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.w_ih, &self.w_hh, &self.w_ho, &self.initial_hidden]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.w_ho, &mut self.initial_hidden]
    }
}

/// `p_{t+1}` and `h_{t+1}` from one step of the printed update rule.
pub fn vanilla_step<T: Scalar>(cell: &VanillaRnnCell<T>, features: &[T], h_t: &[T], p_t: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    cell.step(features, h_t, p_t, IncrementSource::Current)
}

/// Every state of an unrolled [`VanillaRnnCell`]: `T` inputs, `T + 1`
/// hidden states and `T + 1` parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaTrace<T = f64> {
    pub features: Vec<Vec<T>>,
    pub hidden: Vec<Vec<T>>,
    pub params: Vec<Vec<T>>,
    pub increment: IncrementSource,
}

impl<T: Scalar> VanillaTrace<T> {
    pub fn steps(&self) -> usize {
        self.features.len()
    }

    pub fn final_params(&self) -> &[T] {
        self.params.last().expect("trace has p_0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_freeze_parameters() {
        let cell = VanillaRnnCell::<f64>::zeros(5, 4, 3);
        let (h, p) = vanilla_step(&cell, &[1.0; 5], &[0.3; 4], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn feedforward_reduction_without_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cell = VanillaRnnCell::<f64>::init(6, 4, 2, &mut rng);
        cell.w_hh.fill(0.0);
        let x = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6];
        let (h, _) = vanilla_step(&cell, &x, &[0.0; 4], &[0.0; 2]).unwrap();
        for j in 0..4 {
            let a: f64 = (0..6).map(|i| cell.w_ih.data()[j * 6 + i] * x[i]).sum();
            assert_eq!(h[j], a.tanh());
        }
    }

    #[test]
    fn increment_uses_current_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = VanillaRnnCell::<f64>::init(3, 4, 2, &mut rng);
        let h_t = [0.5, -0.5, 0.25, 0.0];
        let (_, p) = vanilla_step(&cell, &[1.0, 1.0, 1.0], &h_t, &[0.0, 0.0]).unwrap();
        for o in 0..2 {
            let want: f64 = (0..4).map(|j| cell.w_ho.data()[o * 4 + j] * h_t[j]).sum();
            assert_eq!(p[o], want);
        }
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let cell = VanillaRnnCell::<f64>::zeros(5, 4, 3);
        assert!(vanilla_step(&cell, &[0.0; 4], &[0.0; 4], &[0.0; 3]).is_err());
        assert!(vanilla_step(&cell, &[0.0; 5], &[0.0; 4], &[0.0; 2]).is_err());
    }

    #[test]
    fn hidden_states_stay_in_tanh_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = VanillaRnnCell::<f64>::init(8, 6, 3, &mut rng);
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..8).map(|_| rng.random_range(-50.0..50.0)).collect())
            .collect();
        let trace = cell.unroll(&feats, vec![0.0; 3], IncrementSource::Current).unwrap();
        assert_eq!(trace.steps(), 6);
        for h in &trace.hidden[1..] {
            assert!(h.iter().all(|v| v.abs() <= 1.0));
        }
    }
}
