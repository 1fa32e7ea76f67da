use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evodhm::alignment_pipeline::*;
use evodhm::diffusion_heatmap::{mean_initial_heatmap, window_radius, DEFAULT_SIGMA};
use evodhm::morphable_model::generate_synthetic_model;
use evodhm::serialization::{decode_ppm, quantize_u8};
use evodhm::tensor_nn::{cost_of, ConvSpec};
use serde_json::Value;
use tempfile::TempDir;

fn evodhm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evodhm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = evodhm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    evodhm(args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Work { dir: tempfile::tempdir().unwrap() }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self, n: usize, seed: u64) -> PathBuf {
        let d = self.p(&format!("data_{n}_{seed}"));
        ok(&["gen-data", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&d)]);
        d
    }
}

fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn gen_data_is_reproducible_and_stratified() {
    let w = Work::new();
    let (a, b) = (w.p("a"), w.p("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--n", "9", "--seed", "4", "--out", s(d)]);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9 * 2 + 3);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let meta = json(&a.join("meta.json"));
    assert_eq!(meta["yaw_bin_counts"], serde_json::json!([3, 3, 3]));
    let (ds, _) = Dataset::load(&a).unwrap();
    assert_eq!(ds.len(), 9);
    for smp in &ds.samples {
        assert!(smp.yaw_deg.abs() <= 90.0);
    }
}

#[test]
fn gen_data_usage_errors_exit_two() {
    let w = Work::new();
    assert_eq!(code(&["gen-data", "--n", "0", "--out", s(&w.p("z"))]), 2);
    assert_eq!(code(&["gen-data", "--out", s(&w.p("z"))]), 2);
    assert_eq!(code(&["gen-data", "--n", "3"]), 2);
    assert_eq!(code(&["gen-data", "--n", "3", "--bogus", "1", "--out", s(&w.p("z"))]), 2);
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let w = Work::new();
    let data = w.data(4, 1);
    let out = w.p("train");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--batch-size", "2", "--lr", "0", "--seed", "6", "--out", s(&out)]);
    let trained = Network::<f64>::load(&out.join("model.evnet")).unwrap();
    let (_, model) = Dataset::load(&data).unwrap();
    let fresh = Network::<f64>::new(trained.config(), &model, 6).unwrap();
    assert_eq!(trained.params(), fresh.params());
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let run = json(&out.join("run.json"));
    assert_eq!(run["command"], "train");
    assert_eq!(run["settings"]["lr"], 0.0);
}

#[test]
fn trained_model_moves_and_reloads() {
    let w = Work::new();
    let data = w.data(4, 2);
    let out = w.p("train");
    ok(&["train", "--data", s(&data), "--epochs", "2", "--batch-size", "2", "--variant", "classic", "--out", s(&out)]);
    let trained = Network::<f64>::load(&out.join("model.evnet")).unwrap();
    assert!(matches!(trained, Network::Classic(_)));
    let (_, model) = Dataset::load(&data).unwrap();
    let fresh = Network::<f64>::new(trained.config(), &model, 0).unwrap();
    assert_ne!(trained.params(), fresh.params());
}

#[test]
fn mean_shape_eval_matches_projection_oracle() {
    let w = Work::new();
    let data = w.data(6, 3);
    let out = w.p("eval");
    ok(&["eval", "--data", s(&data), "--mean-shape", "--out", s(&out)]);
    let (ds, model) = Dataset::load(&data).unwrap();
    let size = ds.config.image_size as f64;
    let (f, c) = (0.6 * size, (size - 1.0) / 2.0);
    let l = model.landmark_count;
    let stub: Vec<[f64; 2]> = (0..l).map(|k| [f * model.mean_shape[k] + c, f * model.mean_shape[l + k] + c]).collect();
    let expected: Vec<f64> = ds
        .samples
        .iter()
        .map(|smp| {
            let gt: Vec<[f64; 2]> = (0..l).map(|k| [smp.landmarks.point(k)[0], smp.landmarks.point(k)[1]]).collect();
            let span = |a: usize| {
                let v = gt.iter().map(|p| p[a]);
                v.clone().fold(f64::MIN, f64::max) - v.fold(f64::MAX, f64::min)
            };
            let d = (span(0) * span(1)).sqrt();
            stub.iter().zip(&gt).map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()).sum::<f64>() / l as f64 / d
        })
        .collect();
    let got = csv_column(&fs::read_to_string(out.join("per_sample.csv")).unwrap(), "nme");
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() <= 1e-12 * e.max(1.0), "{g} vs {e}");
    }
    let report = json(&out.join("report.json"));
    let mean = got.iter().sum::<f64>() / got.len() as f64;
    assert!((report["mean_nme"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(report["schema_version"], 1);
    assert!(fs::read_to_string(out.join("ced.svg")).unwrap().contains("<svg"));
}

#[test]
fn eval_rejects_empty_set_and_missing_predictor() {
    let w = Work::new();
    let data = w.data(3, 3);
    assert_eq!(code(&["eval", "--data", s(&data), "--mean-shape", "--skip", "3", "--out", s(&w.p("e"))]), 2);
    assert_eq!(code(&["eval", "--data", s(&data), "--out", s(&w.p("e"))]), 2);
    assert_eq!(code(&["eval", "--data", s(&w.p("missing")), "--mean-shape", "--out", s(&w.p("e"))]), 3);
}

#[test]
fn network_eval_reports_every_stage() {
    let w = Work::new();
    let data = w.data(4, 5);
    let train = w.p("train");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--batch-size", "4", "--out", s(&train)]);
    let out = w.p("eval");
    ok(&["eval", "--data", s(&data), "--model", s(&train.join("model.evnet")), "--out", s(&out)]);
    let report = json(&out.join("report.json"));
    let stages = report["stage_mean_nme"].as_array().unwrap();
    assert_eq!(stages.len(), PipelineConfig::fast().steps + 1);
    assert_eq!(stages.last().unwrap(), &report["mean_nme"]);
}

#[test]
fn bench_reports_parameters_and_schema() {
    let w = Work::new();
    let mut params = Vec::new();
    for m in ["1", "2"] {
        let out = w.p(&format!("bench{m}"));
        ok(&["bench", "--multiplier", m, "--warmup", "1", "--iters", "10", "--out", s(&out)]);
        let b = json(&out.join("bench.json"));
        assert_eq!(b["schema_version"], 1);
        assert_eq!(b["threads"], 1);
        assert!(b["frames_per_second"].as_f64().unwrap() > 0.0);
        assert!(b["serialized_bytes"].as_u64().unwrap() > 4 * b["parameters"].as_u64().unwrap());
        params.push(b["parameters"].as_u64().unwrap());
    }
    assert!(params[1] > params[0]);
    assert_eq!(code(&["bench", "--iters", "5", "--out", s(&w.p("b"))]), 2);
}

#[test]
fn cost_rows_match_oracle_and_sum_to_total() {
    assert_eq!(cost_of(&ConvSpec::depthwise(3, 64, 1), 112).mult_adds, 7_225_344);
    let w = Work::new();
    for variant in ["fast", "classic"] {
        let out = w.p(variant);
        ok(&["cost", "--variant", variant, "--out", s(&out)]);
        let text = fs::read_to_string(out.join("cost.csv")).unwrap();
        let (macs, params) = (csv_column(&text, "mult_adds"), csv_column(&text, "parameters"));
        let n = macs.len() - 1;
        assert_eq!(macs[..n].iter().sum::<f64>(), macs[n]);
        assert_eq!(params[..n].iter().sum::<f64>(), params[n]);
        let report = json(&out.join("cost.json"));
        assert_eq!(report["total"]["mult_adds"].as_f64().unwrap(), macs[n]);
        assert_eq!(report["separable"].is_null(), variant == "classic");
    }
}

#[test]
fn exported_mean_map_is_local_and_quantized() {
    let w = Work::new();
    let out = w.p("maps");
    ok(&["export-heatmap", "--view", "all", "--out", s(&out)]);
    let d = DatasetConfig::default();
    let model = generate_synthetic_model(d.model_seed, d.landmarks, d.id_dims, d.exp_dims).unwrap();
    let size = d.image_size;
    let map = mean_initial_heatmap(&model, &model.default_pose(size), (size, size), DEFAULT_SIGMA).unwrap();
    let bytes = fs::read(out.join("heatmap_mean_composite.ppm")).unwrap();
    let header = format!("P6\n{size} {size}\n255\n");
    assert_eq!(&bytes[..header.len()], header.as_bytes());
    let pixels = &bytes[header.len()..];
    for (b, v) in pixels.iter().zip(map.data.data()) {
        assert_eq!(*b, quantize_u8(*v));
        assert_eq!(*b, (255.0 * v).round() as u8);
    }
    let decoded = decode_ppm(&bytes).unwrap();
    assert_eq!(decoded.shape(), &[size, size, 3]);

    let stub = model.project_weak_perspective(&model.default_pose(size)).unwrap();
    let r = window_radius(DEFAULT_SIGMA) as f64 + 0.5_f64.hypot(0.5);
    for y in 0..size {
        for x in 0..size {
            if map.data.data()[(y * size + x) * 3..][..3].iter().all(|&v| v == 0.0) {
                continue;
            }
            let near = (0..stub.count()).any(|k| {
                let [px, py] = stub.point(k);
                (x as f64 - px).hypot(y as f64 - py) <= r
            });
            assert!(near, "pixel ({x}, {y}) lit far from every landmark");
        }
    }
    for view in ["x", "y", "z"] {
        let single = fs::read(out.join(format!("heatmap_mean_{view}.ppm"))).unwrap();
        assert!(single[header.len()..].chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }
    assert_eq!(code(&["export-heatmap", "--view", "w", "--out", s(&w.p("bad"))]), 2);
}

#[test]
fn flags_override_config_file_values() {
    let w = Work::new();
    let cfg = w.p("settings.conf");
    fs::write(&cfg, "# dataset\nn = 5\nseed = 2\nmax-yaw-deg = 40\n").unwrap();
    let out = w.p("data");
    ok(&["gen-data", "--config", s(&cfg), "--n", "3", "--out", s(&out)]);
    let run = json(&out.join("run.json"));
    assert_eq!(run["settings"]["n"], 3);
    assert_eq!(run["settings"]["seed"], 2);
    assert_eq!(run["settings"]["max_yaw_deg"], 40.0);
    assert!(run["settings"].get("out").is_none());
    let meta = json(&out.join("meta.json"));
    assert_eq!(meta["count"], 3);
    assert_eq!(meta["seed"], 2);

    fs::write(&cfg, "n = 5\nlearning_rate = 1\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&cfg), "--out", s(&w.p("x"))]), 2);
    fs::write(&cfg, "n = five\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&cfg), "--out", s(&w.p("x"))]), 2);
}
