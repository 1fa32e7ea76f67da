//! Linear 3D landmark model and weak-perspective projection.
//!
//! A shape is `S = S̄ + E_id·p_id + E_exp·p_exp`, stored as a 3×L row-major
//! matrix (row 0 holds every x, row 1 every y, row 2 every z). Basis rows
//! follow the same flattening, so row `j·L + k` is axis `j` of landmark `k`.
//!
//! The projection is `F(p) = f·M·R·S + t_2d` with `M` selecting the x/y rows
//! and `R = R_z(roll)·R_y(yaw)·R_x(pitch)`. Model y points down so projected
//! coordinates land directly in image (row-down) pixel space; pixel centers
//! sit on integer coordinates.

use std::cell::Cell;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::serialization::ChunkFile;

/// Number of pose entries `[f, pitch, yaw, roll, t_x, t_y]` ahead of the
/// shape coefficients in a flattened parameter vector.
pub const POSE_DIMS: usize = 6;

/// Fraction of the crop spanned by the unit-cube mean shape at the default pose.
pub const DEFAULT_FACE_FRACTION: f64 = 0.6;

thread_local! {
    static SHAPE_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`MorphableModel::synthesize_shape`] calls made on this thread.
pub fn shape_evaluations() -> u64 {
    SHAPE_EVALUATIONS.with(Cell::get)
}

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(pitch: f64, yaw: f64, roll: f64) -> Self {
        EulerAngles { pitch, yaw, roll }
    }

    pub fn from_degrees(pitch: f64, yaw: f64, roll: f64) -> Self {
        EulerAngles::new(pitch.to_radians(), yaw.to_radians(), roll.to_radians())
    }
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `R = R_z(roll)·R_y(yaw)·R_x(pitch)`.
pub fn rotation_from_euler(euler: EulerAngles) -> Mat3 {
    mat_mul(&rot_z(euler.roll), &mat_mul(&rot_y(euler.yaw), &rot_x(euler.pitch)))
}

/// Partial derivatives of [`rotation_from_euler`] w.r.t. pitch, yaw and roll.
pub fn rotation_derivatives(euler: EulerAngles) -> [Mat3; 3] {
    let (rx, ry, rz) = (rot_x(euler.pitch), rot_y(euler.yaw), rot_z(euler.roll));
    [
        mat_mul(&rz, &mat_mul(&ry, &d_rot_x(euler.pitch))),
        mat_mul(&rz, &mat_mul(&d_rot_y(euler.yaw), &rx)),
        mat_mul(&d_rot_z(euler.roll), &mat_mul(&ry, &rx)),
    ]
}

/// The pose-and-shape vector `p = [f, R(euler), t_2d, p_id, p_exp]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseShapeParams {
    pub scale: f64,
    pub euler: EulerAngles,
    pub translation: [f64; 2],
    pub id_coeffs: Vec<f64>,
    pub exp_coeffs: Vec<f64>,
}

impl PoseShapeParams {
    pub fn len(&self) -> usize {
        POSE_DIMS + self.id_coeffs.len() + self.exp_coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = vec![
            self.scale,
            self.euler.pitch,
            self.euler.yaw,
            self.euler.roll,
            self.translation[0],
            self.translation[1],
        ];
        v.extend_from_slice(&self.id_coeffs);
        v.extend_from_slice(&self.exp_coeffs);
        v
    }

    pub fn from_vector(v: &[f64], k_id: usize, k_exp: usize) -> Result<Self> {
        contract!(
            v.len() == POSE_DIMS + k_id + k_exp,
            "parameter vector has length {}, expected {}",
            v.len(),
            POSE_DIMS + k_id + k_exp
        );
        Ok(PoseShapeParams {
            scale: v[0],
            euler: EulerAngles::new(v[1], v[2], v[3]),
            translation: [v[4], v[5]],
            id_coeffs: v[POSE_DIMS..POSE_DIMS + k_id].to_vec(),
            exp_coeffs: v[POSE_DIMS + k_id..].to_vec(),
        })
    }
}

/// 3×L landmark coordinates, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape3D {
    pub coords: Vec<f64>,
}

impl Shape3D {
    pub fn count(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn row(&self, axis: usize) -> &[f64] {
        let l = self.count();
        &self.coords[axis * l..(axis + 1) * l]
    }

    pub fn point(&self, k: usize) -> [f64; 3] {
        let l = self.count();
        [self.coords[k], self.coords[l + k], self.coords[2 * l + k]]
    }
}

/// 2×L landmark coordinates in pixels, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks2D {
    pub coords: Vec<f64>,
}

impl Landmarks2D {
    pub fn from_points(points: &[[f64; 2]]) -> Self {
        let mut coords: Vec<f64> = points.iter().map(|p| p[0]).collect();
        coords.extend(points.iter().map(|p| p[1]));
        Landmarks2D { coords }
    }

    pub fn count(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn xs(&self) -> &[f64] {
        &self.coords[..self.count()]
    }

    pub fn ys(&self) -> &[f64] {
        &self.coords[self.count()..]
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.coords[k], self.coords[self.count() + k]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphableModel {
    pub landmark_count: usize,
    pub id_dims: usize,
    pub exp_dims: usize,
    /// 3×L, row-major.
    pub mean_shape: Vec<f64>,
    /// (3L)×K_id, row-major.
    pub id_basis: Vec<f64>,
    /// (3L)×K_exp, row-major.
    pub exp_basis: Vec<f64>,
}

impl MorphableModel {
    pub fn new(
        landmark_count: usize,
        mean_shape: Vec<f64>,
        id_dims: usize,
        id_basis: Vec<f64>,
        exp_dims: usize,
        exp_basis: Vec<f64>,
    ) -> Result<Self> {
        let rows = 3 * landmark_count;
        contract!(landmark_count >= 1, "a model needs at least one landmark");
        contract!(mean_shape.len() == rows, "mean shape must be 3×{landmark_count}");
        contract!(
            id_basis.len() == rows * id_dims,
            "identity basis must be {rows}×{id_dims}"
        );
        contract!(
            exp_basis.len() == rows * exp_dims,
            "expression basis must be {rows}×{exp_dims}"
        );
        contract!(
            mean_shape.iter().all(|v| v.is_finite()),
            "mean shape has non-finite entries"
        );
        let model = MorphableModel {
            landmark_count,
            id_dims,
            exp_dims,
            mean_shape,
            id_basis,
            exp_basis,
        };
        model.check_basis_columns()?;
        Ok(model)
    }

    fn columns(basis: &[f64], k: usize) -> Vec<Vec<f64>> {
        (0..k).map(|c| basis.iter().skip(c).step_by(k).copied().collect()).collect()
    }

    fn check_basis_columns(&self) -> Result<()> {
        let mut cols = Self::columns(&self.id_basis, self.id_dims);
        cols.extend(Self::columns(&self.exp_basis, self.exp_dims));
        for (i, c) in cols.iter().enumerate() {
            contract!(c.iter().all(|v| v.is_finite()), "basis column {i} is not finite");
            contract!(c.iter().any(|&v| v != 0.0), "basis column {i} is zero");
            for (j, d) in cols.iter().enumerate().skip(i + 1) {
                contract!(c != d, "basis columns {i} and {j} coincide");
            }
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        POSE_DIMS + self.id_dims + self.exp_dims
    }

    fn check_params(&self, p: &PoseShapeParams) -> Result<()> {
        contract!(
            p.id_coeffs.len() == self.id_dims && p.exp_coeffs.len() == self.exp_dims,
            "coefficient lengths ({}, {}) do not match basis columns ({}, {})",
            p.id_coeffs.len(),
            p.exp_coeffs.len(),
            self.id_dims,
            self.exp_dims
        );
        Ok(())
    }

    /// `S̄ + E_id·p_id + E_exp·p_exp` as a 3×L shape.
    pub fn synthesize_shape(&self, params: &PoseShapeParams) -> Result<Shape3D> {
        self.check_params(params)?;
        SHAPE_EVALUATIONS.with(|c| c.set(c.get() + 1));
        let mut coords = self.mean_shape.clone();
        for (basis, coeffs) in [
            (&self.id_basis, &params.id_coeffs),
            (&self.exp_basis, &params.exp_coeffs),
        ] {
            let k = coeffs.len();
            if k == 0 {
                continue;
            }
            for (v, row) in coords.iter_mut().zip(basis.chunks_exact(k)) {
                *v += row.iter().zip(coeffs.iter()).map(|(e, p)| e * p).sum::<f64>();
            }
        }
        Ok(Shape3D { coords })
    }

    /// Scaled, rotated and translated 3D shape: rows x/y are the projected
    /// pixel coordinates, row z is `f·(R·S)_z` (pixels, toward the viewer).
    pub fn posed_shape(&self, params: &PoseShapeParams) -> Result<Shape3D> {
        contract!(params.scale > 0.0, "projection scale must be positive, got {}", params.scale);
        let s = self.synthesize_shape(params)?;
        let r = rotation_from_euler(params.euler);
        let l = self.landmark_count;
        let mut coords = vec![0.0; 3 * l];
        for k in 0..l {
            let p = s.point(k);
            for axis in 0..3 {
                let rotated = r[axis][0] * p[0] + r[axis][1] * p[1] + r[axis][2] * p[2];
                let offset = if axis < 2 { params.translation[axis] } else { 0.0 };
                coords[axis * l + k] = params.scale * rotated + offset;
            }
        }
        Ok(Shape3D { coords })
    }

    /// `F(p) = f·M·R·S + t_2d`, in pixels.
    pub fn project_weak_perspective(&self, params: &PoseShapeParams) -> Result<Landmarks2D> {
        let posed = self.posed_shape(params)?;
        Ok(Landmarks2D {
            coords: posed.coords[..2 * self.landmark_count].to_vec(),
        })
    }

    /// Vector-Jacobian product of the projection: given `dL/dF` (2×L,
    /// row-major) returns `dL/dp` in flattened parameter order.
    pub fn project_vjp(&self, params: &PoseShapeParams, grad: &[f64]) -> Result<Vec<f64>> {
        let l = self.landmark_count;
        contract!(grad.len() == 2 * l, "projection gradient must be 2×{l}");
        let s = self.synthesize_shape(params)?;
        let r = rotation_from_euler(params.euler);
        let dr = rotation_derivatives(params.euler);
        let f = params.scale;
        let mut out = vec![0.0; self.param_len()];
        // dL/dS_k = f·Rᵀ·Mᵀ·g_k
        let mut grad_shape = vec![0.0; 3 * l];
        for k in 0..l {
            let p = s.point(k);
            let g = [grad[k], grad[l + k]];
            for (row, &gv) in g.iter().enumerate() {
                let rs: f64 = (0..3).map(|c| r[row][c] * p[c]).sum();
                out[0] += gv * rs;
                for (a, d) in dr.iter().enumerate() {
                    let ds: f64 = (0..3).map(|c| d[row][c] * p[c]).sum();
                    out[1 + a] += gv * f * ds;
                }
                out[4 + row] += gv;
                for c in 0..3 {
                    grad_shape[c * l + k] += gv * f * r[row][c];
                }
            }
        }
        let mut offset = POSE_DIMS;
        for (basis, k) in [(&self.id_basis, self.id_dims), (&self.exp_basis, self.exp_dims)] {
            if k > 0 {
                for (gs, row) in grad_shape.iter().zip(basis.chunks_exact(k)) {
                    for (o, e) in out[offset..offset + k].iter_mut().zip(row) {
                        *o += gs * e;
                    }
                }
            }
            offset += k;
        }
        Ok(out)
    }

    pub fn zero_params(&self, scale: f64, euler: EulerAngles, translation: [f64; 2]) -> PoseShapeParams {
        PoseShapeParams {
            scale,
            euler,
            translation,
            id_coeffs: vec![0.0; self.id_dims],
            exp_coeffs: vec![0.0; self.exp_dims],
        }
    }

    /// Mean shape, frontal, centered in a `size × size` crop.
    pub fn default_pose(&self, image_size: usize) -> PoseShapeParams {
        let c = (image_size as f64 - 1.0) / 2.0;
        self.zero_params(DEFAULT_FACE_FRACTION * image_size as f64, EulerAngles::default(), [c, c])
    }

    pub fn to_chunk_file(&self) -> ChunkFile {
        let mut f = ChunkFile::new(
            "morphable_model",
            serde_json::json!({
                "landmark_count": self.landmark_count,
                "id_dims": self.id_dims,
                "exp_dims": self.exp_dims,
            }),
        );
        let l = self.landmark_count;
        f.push_raw("mean_shape", &[3, l], self.mean_shape.clone());
        f.push_raw("id_basis", &[3 * l, self.id_dims], self.id_basis.clone());
        f.push_raw("exp_basis", &[3 * l, self.exp_dims], self.exp_basis.clone());
        f
    }

    pub fn from_chunk_file(f: &ChunkFile) -> Result<Self> {
        f.expect_kind("morphable_model")?;
        let mean = f.chunk("mean_shape")?;
        let id = f.chunk("id_basis")?;
        let exp = f.chunk("exp_basis")?;
        let bad = |what: &str| Error::Data(format!("morphable model chunk '{what}' has a bad shape"));
        let l = *mean.shape.get(1).ok_or_else(|| bad("mean_shape"))?;
        let k_id = *id.shape.get(1).ok_or_else(|| bad("id_basis"))?;
        let k_exp = *exp.shape.get(1).ok_or_else(|| bad("exp_basis"))?;
        MorphableModel::new(l, mean.data.clone(), k_id, id.data.clone(), k_exp, exp.data.clone())
            .map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MorphableModel = serde_json::from_str(text).map_err(|e| Error::Data(e.to_string()))?;
        MorphableModel::new(m.landmark_count, m.mean_shape, m.id_dims, m.id_basis, m.exp_dims, m.exp_basis)
    }
}

/// Face-like 68-point layout (jaw, brows, nose, eyes, mouth) in the x/y
/// plane, y down.
fn face68_layout() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(68);
    for i in 0..17 {
        let s = i as f64 / 16.0;
        pts.push([-0.5 * (PI * s).cos(), -0.1 + 0.62 * (PI * s).sin()]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let s = i as f64 / 4.0;
            let x = if side < 0.0 { -0.4 + 0.32 * s } else { 0.08 + 0.32 * s };
            pts.push([x, -0.3 - 0.06 * (PI * s).sin()]);
        }
    }
    for i in 0..4 {
        pts.push([0.0, -0.2 + 0.09 * i as f64]);
    }
    for i in 0..5 {
        pts.push([-0.12 + 0.06 * i as f64, 0.13 - 0.02 * (PI * i as f64 / 4.0).sin()]);
    }
    for cx in [-0.22, 0.22] {
        for i in 0..6 {
            let a = PI + 2.0 * PI * i as f64 / 6.0;
            pts.push([cx + 0.09 * a.cos(), -0.15 + 0.035 * a.sin()]);
        }
    }
    for i in 0..12 {
        let a = PI + 2.0 * PI * i as f64 / 12.0;
        pts.push([0.2 * a.cos(), 0.32 + 0.08 * a.sin()]);
    }
    for i in 0..8 {
        let a = PI + 2.0 * PI * i as f64 / 8.0;
        pts.push([0.12 * a.cos(), 0.32 + 0.03 * a.sin()]);
    }
    pts
}

/// Points spread over the front of an ellipse by a golden-angle spiral.
fn spiral_layout(l: usize) -> Vec<[f64; 2]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..l)
        .map(|i| {
            let r = ((i as f64 + 0.5) / l as f64).sqrt();
            let t = golden * i as f64;
            [0.5 * r * t.cos(), 0.65 * r * t.sin()]
        })
        .collect()
}

fn ellipsoid_depth(x: f64, y: f64) -> f64 {
    0.35 * (1.0 - (x / 0.55).powi(2) - (y / 0.72).powi(2)).max(0.0).sqrt()
}

/// Deterministic stand-in for a statistical face model: a face-like mean
/// layout on an ellipsoid plus smooth random polynomial deformation fields
/// whose magnitude decays with the column index.
pub fn generate_synthetic_model(seed: u64, landmarks: usize, id_dims: usize, exp_dims: usize) -> Result<MorphableModel> {
    contract!(landmarks >= 4, "need at least 4 landmarks, got {landmarks}");
    contract!(id_dims >= 1 && exp_dims >= 1, "need at least one identity and one expression column");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = if landmarks == 68 { face68_layout() } else { spiral_layout(landmarks) };

    let mut pts: Vec<[f64; 3]> = layout
        .iter()
        .enumerate()
        .map(|(k, &[x, y])| {
            let mut z = ellipsoid_depth(x, y);
            if landmarks == 68 && (27..36).contains(&k) {
                // nose ridge and base stand out toward the viewer
                z += if k <= 30 { 0.04 * (k - 26) as f64 } else { 0.08 };
            }
            [x, y, z]
        })
        .collect();

    // centroid to the origin, largest axis extent to 1
    for axis in 0..3 {
        let mean = pts.iter().map(|p| p[axis]).sum::<f64>() / landmarks as f64;
        pts.iter_mut().for_each(|p| p[axis] -= mean);
    }
    let extent = (0..3)
        .map(|axis| {
            let (lo, hi) = pts
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[axis]), hi.max(p[axis])));
            hi - lo
        })
        .fold(0.0, f64::max);
    pts.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v /= extent));

    let mut mean_shape = vec![0.0; 3 * landmarks];
    for (k, p) in pts.iter().enumerate() {
        for axis in 0..3 {
            mean_shape[axis * landmarks + k] = p[axis];
        }
    }

    let id_basis = deformation_basis(&pts, id_dims, 0.015, &mut rng);
    let exp_basis = deformation_basis(&pts, exp_dims, 0.01, &mut rng);
    MorphableModel::new(landmarks, mean_shape, id_dims, id_basis, exp_dims, exp_basis)
}

fn deformation_basis(pts: &[[f64; 3]], k: usize, magnitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = pts.len();
    let mut basis = vec![0.0; 3 * l * k];
    for c in 0..k {
        let mut column = vec![0.0; 3 * l];
        for axis in 0..3 {
            let coef: Vec<f64> = (0..9).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for (i, p) in pts.iter().enumerate() {
                let [x, y, z] = *p;
                let monomials = [x, y, z, x * x, y * y, z * z, x * y, x * z, y * z];
                column[axis * l + i] = monomials.iter().zip(&coef).map(|(m, a)| m * a).sum();
            }
            let row = &mut column[axis * l..(axis + 1) * l];
            let mean = row.iter().sum::<f64>() / l as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        let rms = (column.iter().map(|v| v * v).sum::<f64>() / column.len() as f64).sqrt();
        let scale = magnitude / (1.0 + c as f64).powf(0.75) / rms.max(1e-12);
        for (row, v) in column.iter().enumerate() {
            basis[row * k + c] = v * scale;
        }
    }
    basis
}
