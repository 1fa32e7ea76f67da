use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion_heatmap::normalize_channel;
use crate::error::{contract, Error, Result};
use crate::morphable_model::{EulerAngles, Landmarks2D, MorphableModel, PoseShapeParams, Shape3D, DEFAULT_FACE_FRACTION};
use crate::serialization::{decode_ppm, encode_ppm, quantize_u8, ChunkFile};
use crate::tensor_nn::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Upper edges of the absolute-yaw bins, degrees.
pub const YAW_BIN_EDGES: [f64; 3] = [30.0, 60.0, 90.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub landmarks: usize,
    pub id_dims: usize,
    pub exp_dims: usize,
    pub model_seed: u64,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Relative jitter of the projection scale around the default pose.
    pub scale_jitter: f64,
    /// Translation jitter as a fraction of the image size.
    pub translation_jitter: f64,
    pub coeff_std: f64,
    /// Radius of the rendered landmark dots.
    pub splat_sigma: f64,
    /// Amplitude multiplier of the background pattern and pixel noise.
    pub background_contrast: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 64,
            landmarks: 68,
            id_dims: 8,
            exp_dims: 4,
            model_seed: 0,
            max_yaw_deg: 89.0,
            max_pitch_deg: 15.0,
            max_roll_deg: 15.0,
            scale_jitter: 0.1,
            translation_jitter: 0.05,
            coeff_std: 1.0,
            splat_sigma: 1.5,
            background_contrast: 0.3,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.image_size >= 8, "image_size must be at least 8");
        contract!(
            (0.0..=90.0).contains(&self.max_yaw_deg),
            "max_yaw_deg must lie in [0, 90]"
        );
        contract!(
            self.scale_jitter >= 0.0 && self.scale_jitter < 1.0,
            "scale_jitter must lie in [0, 1)"
        );
        contract!(self.translation_jitter >= 0.0, "translation_jitter must be non-negative");
        contract!(self.coeff_std >= 0.0, "coeff_std must be non-negative");
        contract!(self.splat_sigma > 0.0, "splat_sigma must be positive");
        contract!(self.background_contrast >= 0.0, "background_contrast must be non-negative");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// H×W×3, values are multiples of 1/255.
    pub image: Tensor<f64>,
    /// Posed 3×L landmarks in pixels (z toward the viewer).
    pub landmarks: Shape3D,
    pub params: PoseShapeParams,
    pub yaw_deg: f64,
}

impl Sample {
    pub fn landmarks_2d(&self) -> Landmarks2D {
        let l = self.landmarks.count();
        Landmarks2D {
            coords: self.landmarks.coords[..2 * l].to_vec(),
        }
    }

    pub fn image_size(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Pixel to normalized crop coordinate: pixel centres sit at `(i + 0.5) / size`.
pub fn normalize_coord(pixel: f64, size: usize) -> f64 {
    (pixel + 0.5) / size as f64
}

pub fn denormalize_coord(u: f64, size: usize) -> f64 {
    u * size as f64 - 0.5
}

/// 2L normalized coordinates, x row then y row.
pub fn normalized_landmarks(lm: &Landmarks2D, size: usize) -> Vec<f64> {
    lm.coords.iter().map(|&v| normalize_coord(v, size)).collect()
}

pub fn pixel_landmarks(normalized: &[f64], size: usize) -> Landmarks2D {
    Landmarks2D {
        coords: normalized.iter().map(|&u| denormalize_coord(u, size)).collect(),
    }
}

pub fn yaw_bin(yaw_deg: f64) -> usize {
    let a = yaw_deg.abs();
    YAW_BIN_EDGES.iter().position(|&e| a < e).unwrap_or(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn yaw_bin_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.samples {
            c[yaw_bin(s.yaw_deg)] += 1;
        }
        c
    }

    pub fn yaws(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.yaw_deg).collect()
    }

    /// Writes `meta.json`, `model.evam`, `imgNNNN.ppm` and `lmNNNN.txt`.
    pub fn save(&self, dir: &Path, model: &MorphableModel) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let samples: Vec<_> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| json!({"index": i, "yaw_deg": s.yaw_deg, "params": s.params}))
            .collect();
        let meta = json!({
            "schema_version": DATASET_SCHEMA_VERSION,
            "config": self.config,
            "seed": self.seed,
            "count": self.len(),
            "yaw_bin_counts": self.yaw_bin_counts(),
            "samples": samples,
        });
        write_file(&dir.join("meta.json"), (serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n").as_bytes())?;
        model.to_chunk_file().save(&dir.join("model.evam"))?;
        for (i, s) in self.samples.iter().enumerate() {
            write_file(&dir.join(format!("img{i:04}.ppm")), &encode_ppm(&s.image)?)?;
            let l = s.landmarks.count();
            let mut text = String::new();
            for k in 0..l {
                let [x, y, z] = s.landmarks.point(k);
                writeln!(text, "{x} {y} {z}").expect("string write");
            }
            write_file(&dir.join(format!("lm{i:04}.txt")), text.as_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Dataset, MorphableModel)> {
        #[derive(Deserialize)]
        struct Entry {
            yaw_deg: f64,
            params: PoseShapeParams,
        }
        #[derive(Deserialize)]
        struct Meta {
            schema_version: u32,
            config: DatasetConfig,
            seed: u64,
            count: usize,
            samples: Vec<Entry>,
        }
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        if meta.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Data(format!("unsupported dataset schema {}", meta.schema_version)));
        }
        if meta.samples.len() != meta.count {
            return Err(Error::Data(format!(
                "meta.json lists {} samples but count is {}",
                meta.samples.len(),
                meta.count
            )));
        }
        let model = MorphableModel::from_chunk_file(&ChunkFile::load(&dir.join("model.evam"))?)?;
        let cfg = &meta.config;
        if model.landmark_count != cfg.landmarks || model.id_dims != cfg.id_dims || model.exp_dims != cfg.exp_dims {
            return Err(Error::Data("model.evam does not match the dataset configuration".into()));
        }
        let mut samples = Vec::with_capacity(meta.count);
        for (i, entry) in meta.samples.into_iter().enumerate() {
            let img_path = dir.join(format!("img{i:04}.ppm"));
            let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            let image = decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", img_path.display())))?;
            if image.shape()[..2] != [cfg.image_size, cfg.image_size] {
                return Err(Error::Data(format!(
                    "{} is {:?}, expected {}×{}",
                    img_path.display(),
                    image.shape(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            let lm_path = dir.join(format!("lm{i:04}.txt"));
            let text = fs::read_to_string(&lm_path).map_err(|e| Error::io(&lm_path, e))?;
            let landmarks = parse_landmarks(&text, cfg.landmarks)
                .map_err(|m| Error::Data(format!("{}: {m}", lm_path.display())))?;
            samples.push(Sample {
                image,
                landmarks,
                params: entry.params,
                yaw_deg: entry.yaw_deg,
            });
        }
        Ok((
            Dataset {
                config: meta.config,
                seed: meta.seed,
                samples,
            },
            model,
        ))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses `L` lines of `x y [z]`; a missing z reads as 0.
fn parse_landmarks(text: &str, expected: usize) -> std::result::Result<Shape3D, String> {
    let mut rows = Vec::with_capacity(expected);
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("line {}: not a number", n + 1))?;
        match vals.len() {
            2 => rows.push([vals[0], vals[1], 0.0]),
            3 => rows.push([vals[0], vals[1], vals[2]]),
            k => return Err(format!("line {}: expected 2 or 3 values, got {k}", n + 1)),
        }
    }
    if rows.len() != expected {
        return Err(format!("expected {expected} landmarks, found {}", rows.len()));
    }
    let mut coords = vec![0.0; 3 * expected];
    for (k, r) in rows.iter().enumerate() {
        for a in 0..3 {
            coords[a * expected + k] = r[a];
        }
    }
    Ok(Shape3D { coords })
}

/// Random faces from `model`: pose, shape coefficients, a rendered image
/// and exact ground-truth landmarks. Sample `i` draws `|yaw|` from bin
/// `i mod 3` so every pose bin is populated.
pub fn generate_synthetic_dataset(model: &MorphableModel, n: usize, seed: u64, config: &DatasetConfig) -> Result<Dataset> {
    contract!(n >= 1, "dataset needs at least one sample");
    config.validate()?;
    contract!(
        model.landmark_count == config.landmarks && model.id_dims == config.id_dims && model.exp_dims == config.exp_dims,
        "model dimensions ({}, {}, {}) do not match the dataset configuration ({}, {}, {})",
        model.landmark_count,
        model.id_dims,
        model.exp_dims,
        config.landmarks,
        config.id_dims,
        config.exp_dims
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let f0 = DEFAULT_FACE_FRACTION * size as f64;
    let centre = (size as f64 - 1.0) / 2.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let bin = i % 3;
        let lo = [0.0, YAW_BIN_EDGES[0], YAW_BIN_EDGES[1]][bin].min(config.max_yaw_deg);
        let hi = YAW_BIN_EDGES[bin].min(config.max_yaw_deg);
        let magnitude = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let yaw_deg = if rng.random::<bool>() { magnitude } else { -magnitude };
        let pitch_deg = symmetric(&mut rng, config.max_pitch_deg);
        let roll_deg = symmetric(&mut rng, config.max_roll_deg);
        let scale = f0 * (1.0 + symmetric(&mut rng, config.scale_jitter));
        let tj = config.translation_jitter * size as f64;
        let translation = [centre + symmetric(&mut rng, tj), centre + symmetric(&mut rng, tj)];
        let mut coeff = || config.coeff_std * rng.sample::<f64, _>(StandardNormal);
        let id_coeffs = (0..model.id_dims).map(|_| coeff()).collect();
        let exp_coeffs = (0..model.exp_dims).map(|_| coeff()).collect();
        let params = PoseShapeParams {
            scale,
            euler: EulerAngles::from_degrees(pitch_deg, yaw_deg, roll_deg),
            translation,
            id_coeffs,
            exp_coeffs,
        };
        let landmarks = model.posed_shape(&params)?;
        let image = render_face(&landmarks, size, config, &mut rng)?;
        samples.push(Sample {
            image,
            landmarks,
            params,
            yaw_deg,
        });
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        samples,
    })
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Colour of landmark `k`; the 68-point layout is coloured by facial part.
fn landmark_colour(k: usize, count: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.95, 0.85, 0.15],
        [0.15, 0.85, 0.95],
        [0.95, 0.25, 0.85],
        [0.2, 0.95, 0.3],
        [0.95, 0.35, 0.2],
        [0.3, 0.4, 0.98],
    ];
    let group = if count == 68 {
        match k {
            0..=16 => 0,
            17..=26 => 1,
            27..=35 => 2,
            36..=41 => 3,
            42..=47 => 5,
            _ => 4,
        }
    } else {
        k % PALETTE.len()
    };
    PALETTE[group]
}

/// Face proxy: low-frequency noise background, a soft skin ellipse over the
/// landmark hull, and a depth-shaded coloured dot per landmark.
fn render_face<R: Rng + ?Sized>(posed: &Shape3D, size: usize, config: &DatasetConfig, rng: &mut R) -> Result<Tensor<f64>> {
    let (sigma, contrast) = (config.splat_sigma, config.background_contrast);
    let l = posed.count();
    let (xs, ys) = (posed.row(0), posed.row(1));
    let depth = normalize_channel(posed.row(2))?.values;

    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| {
            [
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            ]
        })
        .collect();
    let tint: [f64; 3] = [rng.random_range(0.2..0.45), rng.random_range(0.2..0.45), rng.random_range(0.2..0.45)];

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (cx, cy) = (mean(xs), mean(ys));
    let extent = |v: &[f64], c: f64| v.iter().map(|&a| (a - c).abs()).fold(1.0, f64::max) * 1.15;
    let (rx, ry) = (extent(xs, cx), extent(ys, cy));
    let skin = [0.78, 0.6, 0.48];

    let mut img = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let e = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let s = 0.85 / (1.0 + (-(1.0 - e) * 6.0).exp());
            for c in 0..3 {
                let mut bg = tint[c];
                for (j, w) in waves.iter().enumerate() {
                    if j % 3 == c || j >= 3 {
                        bg += contrast * w[3] * (w[0] * fx + w[1] * fy + w[2]).sin();
                    }
                }
                bg += contrast * rng.random_range(-0.02..0.02);
                img[(y * size + x) * 3 + c] = bg * (1.0 - s) + skin[c] * s;
            }
        }
    }
    let r = (3.0 * sigma).ceil() as i64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in 0..l {
        let (x, y) = (xs[k], ys[k]);
        let colour = landmark_colour(k, l);
        let shade = 0.55 + 0.45 * depth[k];
        let (px, py) = ((x + 0.5).floor() as i64, (y + 0.5).floor() as i64);
        for iy in (py - r).max(0)..=(py + r).min(size as i64 - 1) {
            for ix in (px - r).max(0)..=(px + r).min(size as i64 - 1) {
                let d2 = (ix as f64 - x).powi(2) + (iy as f64 - y).powi(2);
                let a = 0.95 * (-d2 * inv).exp();
                let base = (iy as usize * size + ix as usize) * 3;
                for c in 0..3 {
                    let v = &mut img[base + c];
                    *v = *v * (1.0 - a) + colour[c] * shade * a;
                }
            }
        }
    }
    let quantized = img.into_iter().map(|v| quantize_u8(v) as f64 / 255.0).collect();
    Tensor::from_vec(&[size, size, 3], quantized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable_model::generate_synthetic_model;

    fn small() -> (MorphableModel, DatasetConfig) {
        let cfg = DatasetConfig {
            image_size: 32,
            landmarks: 10,
            id_dims: 2,
            exp_dims: 1,
            ..DatasetConfig::default()
        };
        (generate_synthetic_model(cfg.model_seed, 10, 2, 1).unwrap(), cfg)
    }

    #[test]
    fn same_seed_same_dataset() {
        let (m, cfg) = small();
        let a = generate_synthetic_dataset(&m, 5, 3, &cfg).unwrap();
        let b = generate_synthetic_dataset(&m, 5, 3, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&m, 5, 4, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_samples_rejected() {
        let (m, cfg) = small();
        assert!(generate_synthetic_dataset(&m, 0, 1, &cfg).is_err());
    }

    #[test]
    fn landmark_file_parser() {
        let s = parse_landmarks("1 2 3\n4 5\n", 2).unwrap();
        assert_eq!(s.coords, vec![1.0, 4.0, 2.0, 5.0, 3.0, 0.0]);
        assert!(parse_landmarks("1 2 3\n", 2).is_err());
        assert!(parse_landmarks("1 x\n4 5\n", 2).is_err());
    }

    #[test]
    fn yaw_bins_partition() {
        assert_eq!(yaw_bin(0.0), 0);
        assert_eq!(yaw_bin(-29.999), 0);
        assert_eq!(yaw_bin(30.0), 1);
        assert_eq!(yaw_bin(-60.0), 2);
        assert_eq!(yaw_bin(90.0), 2);
    }

    #[test]
    fn normalization_roundtrip() {
        assert_eq!(normalize_coord(-0.5, 64), 0.0);
        assert_eq!(denormalize_coord(normalize_coord(17.25, 64), 64), 17.25);
    }
}
