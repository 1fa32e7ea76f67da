use super::tensor::{debug_check_finite, Scalar, Tensor};
use crate::error::{contract, Result};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Gradient of ReLU given the forward *input*.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    contract!(x.shape() == grad_out.shape(), "relu_backward shape mismatch");
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

pub fn tanh_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
    debug_check_finite(&y, "tanh_forward");
    y
}

/// Gradient of tanh given the forward *output* `y = tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    contract!(y.shape() == grad_out.shape(), "tanh_backward shape mismatch");
    let mut g = grad_out.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv *= T::one() - yv * yv;
    }
    Ok(g)
}
