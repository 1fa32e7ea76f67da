use rand::Rng;

use super::tensor::{debug_check_finite, Scalar, Tensor};
use crate::error::{contract, Result};

/// Fully-connected layer `y = W·x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f64> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, with_bias: bool, limit: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::random_uniform(&[outputs, inputs], -limit, limit, rng),
            bias: with_bias.then(|| Tensor::zeros(&[outputs])),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, with_bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: with_bias.then(|| Tensor::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        fully_connected_forward(&self.weight, self.bias.as_ref(), x)
    }

    /// Returns `dL/dx` and accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &[T], grad_out: &[T], grads: &mut Linear<T>) -> Result<Vec<T>> {
        let (gx, gw) = fully_connected_backward(&self.weight, x, grad_out)?;
        grads.weight.add_assign(&gw)?;
        if let Some(gb) = grads.bias.as_mut() {
            for (acc, &g) in gb.data_mut().iter_mut().zip(grad_out) {
                *acc += g;
            }
        }
        Ok(gx)
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.inputs(), self.outputs(), self.bias.is_some())
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = vec![&self.weight];
        p.extend(self.bias.as_ref());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = vec![&mut self.weight];
        p.extend(self.bias.as_mut());
        p
    }
}

pub fn fully_connected_forward<T: Scalar>(weight: &Tensor<T>, bias: Option<&Tensor<T>>, x: &[T]) -> Result<Vec<T>> {
    contract!(weight.shape().len() == 2, "weight must be a matrix");
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    contract!(x.len() == cols, "input length {} does not match {cols} columns", x.len());
    let mut y: Vec<T> = weight
        .data()
        .chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(&w, &v)| w * v).sum())
        .collect();
    if let Some(b) = bias {
        contract!(b.len() == rows, "bias length mismatch");
        for (v, &bv) in y.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    debug_assert!(y.iter().all(|v| v.is_finite()), "fully_connected produced a non-finite value");
    Ok(y)
}

/// Returns `(dL/dx, dL/dW)`.
pub fn fully_connected_backward<T: Scalar>(weight: &Tensor<T>, x: &[T], grad_out: &[T]) -> Result<(Vec<T>, Tensor<T>)> {
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    contract!(
        x.len() == cols && grad_out.len() == rows,
        "fully_connected_backward shape mismatch"
    );
    let mut gx = vec![T::zero(); cols];
    let mut gw = Tensor::zeros(&[rows, cols]);
    for (r, &g) in grad_out.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let wrow = &weight.data()[r * cols..][..cols];
        let gwrow = &mut gw.data_mut()[r * cols..][..cols];
        for c in 0..cols {
            gx[c] += g * wrow[c];
            gwrow[c] = g * x[c];
        }
    }
    debug_check_finite(&gw, "fully_connected_backward");
    Ok((gx, gw))
}
