use crate::error::{contract, Result};
use crate::morphable_model::Landmarks2D;

/// NME at which a sample counts as a failure.
pub const FAILURE_THRESHOLD: f64 = 0.06;

pub const CED_POINTS: usize = 121;
/// Upper end of the CED grid, in thousandths.
pub const CED_MAX_MILLI: u32 = 120;

/// Mean Euclidean landmark error divided by `√(w·h)` of the box.
pub fn nme(predicted: &Landmarks2D, ground_truth: &Landmarks2D, bbox: (f64, f64)) -> Result<f64> {
    let (w, h) = bbox;
    contract!(
        w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite(),
        "degenerate bounding box {w}×{h}"
    );
    let l = ground_truth.count();
    contract!(l > 0, "no landmarks");
    contract!(
        predicted.count() == l,
        "predicted {} landmarks, ground truth has {l}",
        predicted.count()
    );
    let d = (w * h).sqrt();
    let sum: f64 = (0..l)
        .map(|k| {
            let (p, g) = (predicted.point(k), ground_truth.point(k));
            (p[0] - g[0]).hypot(p[1] - g[1])
        })
        .sum();
    Ok(sum / l as f64 / d)
}

/// Tight axis-aligned extent `(w, h)` of the landmarks.
pub fn bbox_from_landmarks(landmarks: &Landmarks2D) -> Result<(f64, f64)> {
    contract!(landmarks.count() >= 2, "bounding box needs at least two landmarks");
    let extent = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let (w, h) = (extent(landmarks.xs()), extent(landmarks.ys()));
    contract!(w > 0.0 && h > 0.0, "landmarks span a degenerate {w}×{h} box");
    Ok((w, h))
}

/// NME with the box taken from the ground truth.
pub fn nme_gt_box(predicted: &Landmarks2D, ground_truth: &Landmarks2D) -> Result<f64> {
    nme(predicted, ground_truth, bbox_from_landmarks(ground_truth)?)
}

/// `CED_POINTS` thresholds evenly spaced on `[0, CED_MAX_MILLI / 1000]`.
pub fn default_ced_grid() -> Vec<f64> {
    let denom = (CED_POINTS - 1) as f64 * 1000.0;
    (0..CED_POINTS)
        .map(|i| (i as f64 * CED_MAX_MILLI as f64) / denom)
        .collect()
}

/// `(threshold, fraction of samples with NME ≤ threshold)` per grid point.
pub fn ced_curve(per_sample_nme: &[f64], threshold_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    contract!(!per_sample_nme.is_empty(), "CED needs at least one sample");
    let mut sorted = per_sample_nme.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(threshold_grid
        .iter()
        .map(|&t| (t, sorted.partition_point(|&v| v <= t) as f64 / n))
        .collect())
}

/// Fraction of samples whose NME exceeds `threshold`.
pub fn failure_rate(per_sample_nme: &[f64], threshold: f64) -> f64 {
    if per_sample_nme.is_empty() {
        return 0.0;
    }
    per_sample_nme.iter().filter(|&&v| v > threshold).count() as f64 / per_sample_nme.len() as f64
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(points: &[[f64; 2]]) -> Landmarks2D {
        Landmarks2D::from_points(points)
    }

    #[test]
    fn hand_case() {
        let v = nme(&lm(&[[1.0, 1.0]]), &lm(&[[0.0, 0.0]]), (100.0, 100.0)).unwrap();
        assert!((v - 2f64.sqrt() / 100.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(nme(&lm(&[[0.0, 0.0]]), &lm(&[[0.0, 0.0]]), (0.0, 1.0)).is_err());
        assert!(bbox_from_landmarks(&lm(&[[1.0, 1.0], [1.0, 1.0]])).is_err());
        assert_eq!(bbox_from_landmarks(&lm(&[[0.0, 0.0], [10.0, 20.0]])).unwrap(), (10.0, 20.0));
    }

    #[test]
    fn ced_counts() {
        let c = ced_curve(&[0.02, 0.08], &[0.06]).unwrap();
        assert_eq!(c, vec![(0.06, 0.5)]);
        assert!(ced_curve(&[], &[0.1]).is_err());
        let grid = default_ced_grid();
        assert_eq!(grid.len(), 121);
        assert_eq!(grid[60], 0.06);
        assert_eq!(grid[120], 0.12);
    }
}
