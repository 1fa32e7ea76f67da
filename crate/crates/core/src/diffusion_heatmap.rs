//! Three-channel diffusion heat maps.
//!
//! Each axis of a posed 3D landmark shape is min-max normalized to `[0, 1]`
//! and written into its own channel (x → 0, y → 1, z → 2) as a Gaussian
//! splat centred on the landmark's projected pixel location. Splats are
//! multiplied by the normalized value and overlapping splats combine by
//! per-pixel maximum, so every entry stays in `[0, 1]`.

use crate::error::{contract, Result};
use crate::morphable_model::{Landmarks2D, MorphableModel, PoseShapeParams, Shape3D};
use crate::serialization::quantize_u8;
use crate::tensor_nn::Tensor;

pub const DEFAULT_SIGMA: f64 = 1.0;

/// Value given to every landmark when an axis has zero extent.
pub const DEGENERATE_VALUE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedChannel {
    pub values: Vec<f64>,
    /// Set when `max == min`; `values` are then all [`DEGENERATE_VALUE`].
    pub degenerate: bool,
}

/// `(v − min v) / (max v − min v)`.
pub fn normalize_channel(values: &[f64]) -> Result<NormalizedChannel> {
    contract!(values.len() >= 2, "normalization needs at least 2 values, got {}", values.len());
    contract!(values.iter().all(|v| v.is_finite()), "non-finite coordinate");
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(NormalizedChannel {
            values: vec![DEGENERATE_VALUE; values.len()],
            degenerate: true,
        });
    }
    let range = hi - lo;
    Ok(NormalizedChannel {
        values: values.iter().map(|v| (v - lo) / range).collect(),
        degenerate: false,
    })
}

/// Normalizes each row of a 3×L shape; returns 3×L values and per-axis
/// degeneracy flags.
pub fn normalize_shape(shape: &Shape3D) -> Result<(Vec<f64>, [bool; 3])> {
    let mut out = Vec::with_capacity(shape.coords.len());
    let mut flags = [false; 3];
    for (axis, flag) in flags.iter_mut().enumerate() {
        let ch = normalize_channel(shape.row(axis))?;
        *flag = ch.degenerate;
        out.extend(ch.values);
    }
    Ok((out, flags))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionHeatMap {
    /// H×W×3.
    pub data: Tensor<f64>,
    pub resolution: (usize, usize),
    pub sigma: f64,
    pub degenerate_axes: [bool; 3],
}

/// Channel selection for image export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapView {
    X,
    Y,
    Z,
    Composite,
}

impl DiffusionHeatMap {
    pub fn height(&self) -> usize {
        self.resolution.0
    }

    pub fn width(&self) -> usize {
        self.resolution.1
    }

    pub fn l2_distance(&self, other: &DiffusionHeatMap) -> f64 {
        self.data
            .data()
            .iter()
            .zip(other.data.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// 8-bit binary PPM. Single-channel views are written as gray.
    pub fn to_ppm(&self, view: HeatmapView) -> Vec<u8> {
        let (h, w) = self.resolution;
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for px in self.data.data().chunks_exact(3) {
            match view {
                HeatmapView::Composite => out.extend(px.iter().map(|&v| quantize_u8(v))),
                single => {
                    let v = quantize_u8(px[single as usize]);
                    out.extend([v, v, v]);
                }
            }
        }
        out
    }
}

/// Truncation radius of a splat, in pixels.
pub fn window_radius(sigma: f64) -> i64 {
    (3.0 * sigma).ceil() as i64
}

/// Splats `normalized_xyz[j][k] · G(‖pixel − loc_k‖; σ)` into channel `j`.
///
/// The window is centred on the landmark rounded half-up to the nearest
/// pixel and truncated to radius `⌈3σ⌉`; the Gaussian itself is evaluated at
/// the sub-pixel location. Landmarks outside the image contribute only the
/// in-bounds part of their window.
pub fn rasterize_heatmap(
    shape2d: &Landmarks2D,
    normalized_xyz: &[f64],
    resolution: (usize, usize),
    sigma: f64,
) -> Result<DiffusionHeatMap> {
    contract!(sigma > 0.0, "sigma must be positive, got {sigma}");
    let l = shape2d.count();
    contract!(
        normalized_xyz.len() == 3 * l,
        "expected 3×{l} normalized values, got {}",
        normalized_xyz.len()
    );
    let (h, w) = resolution;
    let mut data: Tensor<f64> = Tensor::zeros(&[h, w, 3]);
    let buf = data.data_mut();
    let r = window_radius(sigma);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in 0..l {
        let [x, y] = shape2d.point(k);
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        let (cx, cy) = ((x + 0.5).floor() as i64, (y + 0.5).floor() as i64);
        let vals = [normalized_xyz[k], normalized_xyz[l + k], normalized_xyz[2 * l + k]];
        for py in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for px in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                let (dx, dy) = (px - cx, py - cy);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let d2 = (px as f64 - x).powi(2) + (py as f64 - y).powi(2);
                let g = (-d2 * inv).exp();
                let base = (py as usize * w + px as usize) * 3;
                for (slot, v) in buf[base..base + 3].iter_mut().zip(vals) {
                    *slot = slot.max(v * g);
                }
            }
        }
    }
    debug_assert!(data.data().iter().all(|v| (0.0..=1.0).contains(v)));
    Ok(DiffusionHeatMap {
        data,
        resolution,
        sigma,
        degenerate_axes: [false; 3],
    })
}

/// Heat map of the posed shape for `params`: project, normalize each axis,
/// splat.
pub fn heatmap_for_params(
    model: &MorphableModel,
    params: &PoseShapeParams,
    resolution: (usize, usize),
    sigma: f64,
) -> Result<DiffusionHeatMap> {
    let posed = model.posed_shape(params)?;
    let (normalized, flags) = normalize_shape(&posed)?;
    let l = model.landmark_count;
    let shape2d = Landmarks2D {
        coords: posed.coords[..2 * l].to_vec(),
    };
    let mut map = rasterize_heatmap(&shape2d, &normalized, resolution, sigma)?;
    map.degenerate_axes = flags;
    Ok(map)
}

/// The mean-shape heat map used to initialise alignment.
pub fn mean_initial_heatmap(
    model: &MorphableModel,
    default_pose: &PoseShapeParams,
    resolution: (usize, usize),
    sigma: f64,
) -> Result<DiffusionHeatMap> {
    let mut mean = default_pose.clone();
    mean.id_coeffs.iter_mut().for_each(|v| *v = 0.0);
    mean.exp_coeffs.iter_mut().for_each(|v| *v = 0.0);
    heatmap_for_params(model, &mean, resolution, sigma)
}

/// Heat map carrying location only: every landmark splats value 1 into all
/// three channels.
pub fn location_heatmap(landmarks: &Landmarks2D, resolution: (usize, usize), sigma: f64) -> Result<DiffusionHeatMap> {
    rasterize_heatmap(landmarks, &vec![1.0; 3 * landmarks.count()], resolution, sigma)
}

/// H×W×6 network input: image RGB in channels 0–2, heat map in 3–5.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack {
    pub data: Tensor<f64>,
}

pub fn build_input_stack(image: &Tensor<f64>, heatmap: &DiffusionHeatMap) -> Result<InputStack> {
    let (h, w, c) = image.hwc()?;
    contract!(c == 3, "image must have 3 channels, got {c}");
    contract!(
        (h, w) == heatmap.resolution,
        "image is {h}×{w} but heat map is {}×{}",
        heatmap.resolution.0,
        heatmap.resolution.1
    );
    let mut out = Vec::with_capacity(h * w * 6);
    for (img, map) in image.data().chunks_exact(3).zip(heatmap.data.data().chunks_exact(3)) {
        out.extend_from_slice(img);
        out.extend_from_slice(map);
    }
    Ok(InputStack {
        data: Tensor::from_vec(&[h, w, 6], out)?,
    })
}
