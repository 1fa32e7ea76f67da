//! Naive scalar-loop reference kernels.
//!
//! These loops are written for clarity, not speed, and are used to check the
//! production kernels and to count multiply-accumulates for the cost model.

use super::conv::{ConvMode, ConvSpec};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Dense reference convolution. Returns the output and the number of
/// multiply-accumulates executed; taps that land in the zero padding are
/// executed (and counted) like any other tap.
pub fn conv2d_counting<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weights: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
    spec.validate()?;
    let (h, w, c_in) = input.hwc()?;
    let (oh, ow) = spec.output_size(h, w)?;
    let k = spec.kernel_size;
    let c_out = spec.out_channels;
    let mut out = Tensor::zeros(&[oh, ow, c_out]);
    let mut macs = 0u64;

    let fetch = |y: isize, x: isize, c: usize| -> T {
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            T::zero()
        } else {
            input.data()[(y as usize * w + x as usize) * c_in + c]
        }
    };

    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..c_out {
                let mut acc = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        match spec.mode {
                            ConvMode::Depthwise => {
                                let wv = weights.data()[(ky * k + kx) * c_out + co];
                                acc += fetch(iy, ix, co) * wv;
                                macs += 1;
                            }
                            _ => {
                                for ci in 0..c_in {
                                    let wv = weights.data()[((ky * k + kx) * c_in + ci) * c_out + co];
                                    acc += fetch(iy, ix, ci) * wv;
                                    macs += 1;
                                }
                            }
                        }
                    }
                }
                out.data_mut()[(oy * ow + ox) * c_out + co] = acc;
            }
        }
    }
    Ok((out, macs))
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weights: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_counting(input, spec, weights).map(|(t, _)| t)
}

/// `y[o] = Σ_i W[o][i]·x[i] + b[o]`, written as plain loops.
pub fn matvec<T: Scalar>(w: &Tensor<T>, x: &[T], b: Option<&[T]>) -> Vec<T> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![T::zero(); rows];
    for (r, yr) in y.iter_mut().enumerate() {
        let mut acc = T::zero();
        for c in 0..cols {
            acc += w.data()[r * cols + c] * x[c];
        }
        *yr = acc + b.map_or(T::zero(), |b| b[r]);
    }
    y
}
