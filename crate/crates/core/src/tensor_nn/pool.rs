use super::tensor::{Scalar, Tensor};
use crate::error::{contract, Result};

/// Forward state of a max-pool: output plus the flat input index that won
/// each output cell.
#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Non-overlapping `size × size` max pooling (floor on odd extents).
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, MaxPoolCache)> {
    let (h, w, c) = x.hwc()?;
    contract!(size >= 1 && h >= size && w >= size, "pool size {size} too large for {h}×{w}");
    let (oh, ow) = (h / size, w / size);
    let mut out = vec![T::neg_infinity(); oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    let xd = x.data();
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..size {
                for dx in 0..size {
                    let base = ((oy * size + dy) * w + ox * size + dx) * c;
                    for ch in 0..c {
                        let o = (oy * ow + ox) * c + ch;
                        if xd[base + ch] > out[o] {
                            out[o] = xd[base + ch];
                            argmax[o] = base + ch;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[oh, ow, c], out)?,
        MaxPoolCache {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool_backward<T: Scalar>(cache: &MaxPoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    contract!(grad_out.len() == cache.argmax.len(), "maxpool_backward shape mismatch");
    let mut g = Tensor::zeros(&cache.input_shape);
    for (&idx, &gv) in cache.argmax.iter().zip(grad_out.data()) {
        g.data_mut()[idx] += gv;
    }
    Ok(g)
}
