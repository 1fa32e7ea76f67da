//! 2D convolution kernels in HWC layout.
//!
//! All modes compute cross-correlation (no kernel flip) with zero padding.
//! Weight layouts:
//! - standard / pointwise: `[k, k, C_in, C_out]`
//! - depthwise: `[k, k, C]`, filter `c` touches channel `c` only

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{debug_check_finite, Scalar, Tensor};
use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    Standard,
    Depthwise,
    Pointwise,
}

impl ConvMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConvMode::Standard => "standard",
            ConvMode::Depthwise => "depthwise",
            ConvMode::Pointwise => "pointwise",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: ConvMode,
}

impl ConvSpec {
    /// Standard convolution with "same" padding.
    pub fn standard(kernel_size: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            kernel_size,
            in_channels,
            out_channels,
            stride,
            padding: kernel_size / 2,
            mode: ConvMode::Standard,
        }
    }

    pub fn depthwise(kernel_size: usize, channels: usize, stride: usize) -> Self {
        ConvSpec {
            kernel_size,
            in_channels: channels,
            out_channels: channels,
            stride,
            padding: kernel_size / 2,
            mode: ConvMode::Depthwise,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            kernel_size: 1,
            in_channels,
            out_channels,
            stride: 1,
            padding: 0,
            mode: ConvMode::Pointwise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.kernel_size >= 1, "kernel size must be positive");
        contract!(self.stride >= 1, "stride must be positive");
        contract!(
            self.in_channels >= 1 && self.out_channels >= 1,
            "channel counts must be positive"
        );
        match self.mode {
            ConvMode::Depthwise => contract!(
                self.in_channels == self.out_channels,
                "depthwise convolution needs C_out = C_in (got {} -> {})",
                self.in_channels,
                self.out_channels
            ),
            ConvMode::Pointwise => contract!(
                self.kernel_size == 1 && self.padding == 0,
                "pointwise convolution needs a 1×1 kernel without padding"
            ),
            ConvMode::Standard => {}
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel_size;
        match self.mode {
            ConvMode::Depthwise => vec![k, k, self.out_channels],
            _ => vec![k, k, self.in_channels, self.out_channels],
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        contract!(
            h + 2 * self.padding >= k && w + 2 * self.padding >= k,
            "input {h}×{w} smaller than kernel {k} with padding {}",
            self.padding
        );
        Ok((
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        ))
    }

    pub fn fan_in(&self) -> usize {
        match self.mode {
            ConvMode::Depthwise => self.kernel_size * self.kernel_size,
            _ => self.kernel_size * self.kernel_size * self.in_channels,
        }
    }
}

fn check_shapes<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weights: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    spec.validate()?;
    let (h, w, c) = input.hwc()?;
    contract!(
        c == spec.in_channels,
        "input has {c} channels, spec expects {}",
        spec.in_channels
    );
    contract!(
        weights.shape() == spec.weight_shape().as_slice(),
        "weight shape {:?} does not match spec {:?}",
        weights.shape(),
        spec.weight_shape()
    );
    let (oh, ow) = spec.output_size(h, w)?;
    Ok((h, w, c, oh, ow))
}

/// Input index range touched by kernel row `k` for output coordinate `o`.
#[inline]
fn input_coord(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let pos = (o * stride + k) as isize - pad as isize;
    if pos >= 0 && (pos as usize) < limit {
        Some(pos as usize)
    } else {
        None
    }
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c_in, oh, ow) = check_shapes(input, spec, weights)?;
    let k = spec.kernel_size;
    let c_out = spec.out_channels;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![T::zero(); oh * ow * c_out];

    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * c_out..][..c_out];
            for ky in 0..k {
                let Some(iy) = input_coord(oy, ky, spec.stride, spec.padding, h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = input_coord(ox, kx, spec.stride, spec.padding, w) else {
                        continue;
                    };
                    let px = &x[(iy * w + ix) * c_in..][..c_in];
                    match spec.mode {
                        ConvMode::Depthwise => {
                            let wk = &wt[(ky * k + kx) * c_out..][..c_out];
                            for ((acc, &v), &wv) in o.iter_mut().zip(px).zip(wk) {
                                *acc += v * wv;
                            }
                        }
                        _ => {
                            let base = (ky * k + kx) * c_in * c_out;
                            for (ci, &v) in px.iter().enumerate() {
                                if v == T::zero() {
                                    continue;
                                }
                                let wrow = &wt[base + ci * c_out..][..c_out];
                                for (acc, &wv) in o.iter_mut().zip(wrow) {
                                    *acc += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[oh, ow, c_out], out)?;
    debug_check_finite(&out, "conv2d_forward");
    Ok(out)
}

/// Exact gradients of [`conv2d_forward`] with respect to its input and weights.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c_in, oh, ow) = check_shapes(cached_input, spec, weights)?;
    let c_out = spec.out_channels;
    contract!(
        grad_out.shape() == [oh, ow, c_out],
        "grad_out shape {:?} does not match forward output [{oh}, {ow}, {c_out}]",
        grad_out.shape()
    );
    let k = spec.kernel_size;
    let x = cached_input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];

    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * c_out..][..c_out];
            for ky in 0..k {
                let Some(iy) = input_coord(oy, ky, spec.stride, spec.padding, h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = input_coord(ox, kx, spec.stride, spec.padding, w) else {
                        continue;
                    };
                    let pix = (iy * w + ix) * c_in;
                    match spec.mode {
                        ConvMode::Depthwise => {
                            let wbase = (ky * k + kx) * c_out;
                            for c in 0..c_out {
                                gx[pix + c] += go[c] * wt[wbase + c];
                                gw[wbase + c] += go[c] * x[pix + c];
                            }
                        }
                        _ => {
                            let base = (ky * k + kx) * c_in * c_out;
                            for ci in 0..c_in {
                                let v = x[pix + ci];
                                let row = base + ci * c_out;
                                let wrow = &wt[row..][..c_out];
                                let mut acc = T::zero();
                                for (&gv, &wv) in go.iter().zip(wrow) {
                                    acc += gv * wv;
                                }
                                gx[pix + ci] += acc;
                                if v != T::zero() {
                                    for (gwv, &gv) in gw[row..][..c_out].iter_mut().zip(go) {
                                        *gwv += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = Tensor::from_vec(&[h, w, c_in], gx)?;
    let gw = Tensor::from_vec(&spec.weight_shape(), gw)?;
    debug_check_finite(&gx, "conv2d_backward");
    Ok((gx, gw))
}

/// Convolution layer: kernel weights plus an optional per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f64> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform initialization: `U(-√(6/fan_in), √(6/fan_in))`, zero bias.
    pub fn init<R: Rng + ?Sized>(spec: ConvSpec, with_bias: bool, rng: &mut R) -> Self {
        let limit = (6.0 / spec.fan_in() as f64).sqrt();
        Self::init_uniform(spec, with_bias, limit, rng)
    }

    pub fn init_uniform<R: Rng + ?Sized>(spec: ConvSpec, with_bias: bool, limit: f64, rng: &mut R) -> Self {
        Conv2d {
            spec,
            weight: Tensor::random_uniform(&spec.weight_shape(), -limit, limit, rng),
            bias: with_bias.then(|| Tensor::zeros(&[spec.out_channels])),
        }
    }

    pub fn zeros(spec: ConvSpec, with_bias: bool) -> Self {
        Conv2d {
            spec,
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: with_bias.then(|| Tensor::zeros(&[spec.out_channels])),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = conv2d_forward(input, &self.spec, &self.weight)?;
        if let Some(b) = &self.bias {
            let c = self.spec.out_channels;
            for px in out.data_mut().chunks_exact_mut(c) {
                for (v, &bv) in px.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and accumulates parameter gradients into `grads`.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>, grads: &mut Conv2d<T>) -> Result<Tensor<T>> {
        let (gx, gw) = conv2d_backward(grad_out, input, &self.spec, &self.weight)?;
        grads.weight.add_assign(&gw)?;
        if let Some(gb) = grads.bias.as_mut() {
            let c = self.spec.out_channels;
            let gbd = gb.data_mut();
            for px in grad_out.data().chunks_exact(c) {
                for (acc, &v) in gbd.iter_mut().zip(px) {
                    *acc += v;
                }
            }
        }
        Ok(gx)
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d::zeros(self.spec, self.bias.is_some())
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            spec: self.spec,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_on_single_pixel() {
        let spec = ConvSpec::pointwise(1, 1);
        let x = Tensor::from_vec(&[1, 1, 1], vec![3.5]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &spec, &w).unwrap(), x);
    }

    #[test]
    fn depthwise_ones_window_counts() {
        let spec = ConvSpec::depthwise(3, 1, 1);
        let x = Tensor::full(&[5, 5, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1], 1.0);
        let y = conv2d_forward(&x, &spec, &w).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1]);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let spec = ConvSpec::standard(3, 2, 3, 1);
        let mut rng = rand::rng();
        let x = Tensor::<f64>::random_uniform(&[4, 4, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform(&spec.weight_shape(), -1.0, 1.0, &mut rng);
        let (gx, gw) = conv2d_backward(&Tensor::zeros(&[4, 4, 3]), &x, &spec, &w).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_weight_gradient_shape() {
        let spec = ConvSpec::depthwise(3, 5, 1);
        let x = Tensor::<f64>::full(&[4, 4, 5], 0.5);
        let w = Tensor::full(&[3, 3, 5], 0.1);
        let (_, gw) = conv2d_backward(&Tensor::full(&[4, 4, 5], 1.0), &x, &spec, &w).unwrap();
        assert_eq!(gw.len(), 3 * 3 * 5);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let spec = ConvSpec::standard(3, 2, 3, 1);
        let x = Tensor::<f64>::zeros(&[4, 4, 3]);
        let w = Tensor::zeros(&spec.weight_shape());
        assert!(conv2d_forward(&x, &spec, &w).is_err());
        let bad = ConvSpec {
            out_channels: 4,
            ..ConvSpec::depthwise(3, 2, 1)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        let spec = ConvSpec::standard(3, 1, 1, 2);
        assert_eq!(spec.output_size(64, 64).unwrap(), (32, 32));
        assert_eq!(spec.output_size(7, 7).unwrap(), (4, 4));
    }
}
