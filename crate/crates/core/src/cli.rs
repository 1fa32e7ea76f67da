//! The `evodhm` command-line front end.
//!
//! Every subcommand resolves its settings as flags > `--config` file >
//! built-in defaults and echoes the result to `<out>/run.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::alignment_pipeline::{
    generate_synthetic_dataset, train, Ablation, AlignmentContext, Dataset, DatasetConfig, Network, PipelineConfig,
    Variant,
};
use crate::diffusion_heatmap::{mean_initial_heatmap, DiffusionHeatMap, HeatmapView};
use crate::error::Error;
use crate::evaluation::{benchmark, nme_gt_box, pose_binned_report, REPORT_SCHEMA_VERSION};
use crate::evolutionary_rnn::IncrementSource;
use crate::morphable_model::{generate_synthetic_model, Landmarks2D, MorphableModel};
use crate::serialization::encode_ppm;
use crate::tensor_nn::{separable_reduction_ratio, total, ConvSpec};

pub const MODEL_FILE: &str = "model.evnet";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    /// 2 usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Contract(_)) => 2,
            CliError::Lib(Error::Io { .. } | Error::Data(_)) => 3,
            CliError::Lib(Error::NonFinite(_)) => 4,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "evodhm", version, about = "Evolutionary face alignment on 3D diffusion heat maps")]
pub struct Cli {
    /// Plain-text `key = value` settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory that receives every output of the run.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained network (or the mean-shape stub) on a dataset.
    Eval(EvalArgs),
    /// Single-thread throughput, parameter count and file size.
    Bench(BenchArgs),
    /// Per-layer multiply-accumulate and parameter table.
    Cost(CostArgs),
    /// Write diffusion heat maps as PPM images.
    ExportHeatmap(ExportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
            Command::Cost(_) => "cost",
            Command::ExportHeatmap(_) => "export-heatmap",
        }
    }
}

/// Image and morphable-model dimensions.
#[derive(Debug, Default, Args)]
pub struct ShapeArgs {
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub landmarks: Option<usize>,
    #[arg(long)]
    pub id_dims: Option<usize>,
    #[arg(long)]
    pub exp_dims: Option<usize>,
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct NetArgs {
    /// `fast` or `classic`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Channel width multiplier.
    #[arg(long)]
    pub multiplier: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub cnn_blocks: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `none`, `no_heatmap_2d_rnn` or `no_recurrence_3d_cnn`.
    #[arg(long)]
    pub ablation: Option<String>,
    /// `current` or `next`.
    #[arg(long)]
    pub increment: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long)]
    pub max_yaw_deg: Option<f64>,
    #[arg(long)]
    pub splat_sigma: Option<f64>,
    #[arg(long)]
    pub background_contrast: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on the first N samples only.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_reset_epoch: Option<usize>,
    #[arg(long)]
    pub stage_loss_weight: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Network file written by `train`.
    #[arg(long, conflicts_with = "mean_shape")]
    pub model: Option<PathBuf>,
    /// Predict the mean-shape initialisation for every sample.
    #[arg(long)]
    pub mean_shape: bool,
    /// Skip the first N samples.
    #[arg(long)]
    pub skip: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained network; without it a freshly initialised one is timed.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Narrowest block included in the separable/standard comparison.
    #[arg(long)]
    pub min_width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Dataset directory; its morphable model is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// `x`, `y`, `z`, `composite` or `all`.
    #[arg(long)]
    pub view: Option<String>,
    /// Trained network whose per-iteration heat maps are exported.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset sample fed to `--model`.
    #[arg(long)]
    pub sample: Option<usize>,
}

/// Flag / file / default resolution with an echo of every resolved value.
struct Settings {
    file: BTreeMap<String, String>,
    used: Vec<String>,
    resolved: BTreeMap<String, Value>,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("{}:{}: expected `key = value`", p.display(), n + 1)))?;
                let v = v.trim().trim_matches('"');
                file.insert(k.trim().replace('-', "_"), v.to_string());
            }
        }
        Ok(Settings {
            file,
            used: Vec::new(),
            resolved: BTreeMap::new(),
        })
    }

    fn get<T: FromStr + Serialize>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        self.used.push(key.to_string());
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(s) => Some(s.parse().map_err(|_| usage(format!("config value `{key} = {s}` is invalid")))?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), json!(v));
        }
        Ok(value)
    }

    fn or<T: FromStr + Serialize>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        let v = self.get(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), json!(v));
        Ok(v)
    }

    fn flag(&mut self, key: &str, flag: bool) -> CliResult<bool> {
        self.or(key, flag.then_some(true), false)
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
        let v = self.get::<String>(key, flag.map(|p| p.to_string_lossy().into_owned()))?;
        Ok(v.map(PathBuf::from))
    }

    fn finish(&self) -> CliResult<()> {
        match self.file.keys().find(|k| !self.used.contains(k)) {
            Some(k) => Err(usage(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let seed = s.or("seed", cli.seed, 0u64)?;
    let deterministic = s.flag("deterministic", cli.deterministic)?;
    let out = s.path("out", cli.out)?.ok_or_else(|| usage("--out is required"))?;
    s.resolved.remove("out");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let command = cli.command;
    let mut work = move || -> CliResult<()> {
        let name = command.name();
        let extra = match &command {
            Command::GenData(a) => cmd_gen_data(&mut s, a, seed, &out)?,
            Command::Train(a) => cmd_train(&mut s, a, seed, &out)?,
            Command::Eval(a) => cmd_eval(&mut s, a, &out)?,
            Command::Bench(a) => cmd_bench(&mut s, a, seed, &out)?,
            Command::Cost(a) => cmd_cost(&mut s, a, &out)?,
            Command::ExportHeatmap(a) => cmd_export_heatmap(&mut s, a, &out)?,
        };
        let echo = json!({
            "schema_version": REPORT_SCHEMA_VERSION,
            "command": name,
            "settings": s.resolved,
            "resolved": extra,
        });
        write(&out.join("run.json"), pretty(&echo).as_bytes())
    };
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| usage(format!("cannot build a single-thread pool: {e}")))?
            .install(work)
    } else {
        work()
    }
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("JSON value") + "\n"
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("{flag} is required")))
}

fn dataset_config(s: &mut Settings, a: &ShapeArgs) -> CliResult<DatasetConfig> {
    let d = DatasetConfig::default();
    Ok(DatasetConfig {
        image_size: s.or("image_size", a.image_size, d.image_size)?,
        landmarks: s.or("landmarks", a.landmarks, d.landmarks)?,
        id_dims: s.or("id_dims", a.id_dims, d.id_dims)?,
        exp_dims: s.or("exp_dims", a.exp_dims, d.exp_dims)?,
        model_seed: s.or("model_seed", a.model_seed, d.model_seed)?,
        ..d
    })
}

fn synthetic_model(cfg: &DatasetConfig) -> CliResult<MorphableModel> {
    Ok(generate_synthetic_model(cfg.model_seed, cfg.landmarks, cfg.id_dims, cfg.exp_dims)?)
}

fn pipeline_config(s: &mut Settings, a: &NetArgs, dims: &DatasetConfig) -> CliResult<PipelineConfig> {
    let variant = s.or("variant", a.variant.clone(), "fast".to_string())?;
    let variant = Variant::parse(&variant).ok_or_else(|| usage(format!("unknown variant `{variant}`")))?;
    let mut c = match variant {
        Variant::FastDhm => PipelineConfig::fast(),
        Variant::ClassicDhm => PipelineConfig::classic(),
    };
    c.image_size = dims.image_size;
    c.landmarks = dims.landmarks;
    c.id_dims = dims.id_dims;
    c.exp_dims = dims.exp_dims;
    c.width_multiplier = s.or("multiplier", a.multiplier, c.width_multiplier)?;
    c.steps = s.or("steps", a.steps, c.steps)?;
    c.hidden_dim = s.or("hidden_dim", a.hidden_dim, c.hidden_dim)?;
    c.kernel_size = s.or("kernel_size", a.kernel_size, c.kernel_size)?;
    c.cnn_block_count = s.or("cnn_blocks", a.cnn_blocks, c.cnn_block_count)?;
    c.sigma = s.or("sigma", a.sigma, c.sigma)?;
    let ablation = s.or("ablation", a.ablation.clone(), c.ablation.as_str().to_string())?;
    c.ablation = Ablation::parse(&ablation).ok_or_else(|| usage(format!("unknown ablation `{ablation}`")))?;
    let increment = s.or("increment", a.increment.clone(), "current".to_string())?;
    c.increment = match increment.as_str() {
        "current" => IncrementSource::Current,
        "next" => IncrementSource::Next,
        other => return Err(usage(format!("unknown increment `{other}`"))),
    };
    c.validate()?;
    Ok(c)
}

fn load_dataset(dir: &Path) -> CliResult<(Dataset, MorphableModel)> {
    Ok(Dataset::load(dir)?)
}

fn cmd_gen_data(s: &mut Settings, a: &GenDataArgs, seed: u64, out: &Path) -> CliResult<Value> {
    let n = required(s.get("n", a.n)?, "--n")?;
    let mut cfg = dataset_config(s, &a.shape)?;
    cfg.max_yaw_deg = s.or("max_yaw_deg", a.max_yaw_deg, cfg.max_yaw_deg)?;
    cfg.splat_sigma = s.or("splat_sigma", a.splat_sigma, cfg.splat_sigma)?;
    cfg.background_contrast = s.or("background_contrast", a.background_contrast, cfg.background_contrast)?;
    s.finish()?;
    let model = synthetic_model(&cfg)?;
    let ds = generate_synthetic_dataset(&model, n, seed, &cfg)?;
    ds.save(out, &model)?;
    let bins = ds.yaw_bin_counts();
    println!(
        "wrote {n} samples to {} (yaw bins {:?}, {}x{} px, {} landmarks)",
        out.display(),
        bins,
        cfg.image_size,
        cfg.image_size,
        cfg.landmarks
    );
    Ok(json!({"dataset": cfg, "count": n, "yaw_bin_counts": bins}))
}

fn cmd_train(s: &mut Settings, a: &TrainArgs, seed: u64, out: &Path) -> CliResult<Value> {
    let data = required(s.path("data", a.data.clone())?, "--data")?;
    let limit = s.get("limit", a.limit)?;
    let (mut ds, model) = load_dataset(&data)?;
    let mut cfg = pipeline_config(s, &a.net, &ds.config)?;
    cfg.epochs = s.or("epochs", a.epochs, cfg.epochs)?;
    cfg.batch_size = s.or("batch_size", a.batch_size, cfg.batch_size)?;
    cfg.learning_rate = s.get("lr", a.lr)?;
    cfg.lr_reset_epoch = s.get("lr_reset_epoch", a.lr_reset_epoch)?;
    cfg.stage_loss_weight = s.or("stage_loss_weight", a.stage_loss_weight, cfg.stage_loss_weight)?;
    cfg.grad_clip = s.get("grad_clip", a.grad_clip)?;
    s.finish()?;
    cfg.validate()?;
    if let Some(l) = limit {
        if l == 0 {
            return Err(usage("--limit must be positive"));
        }
        ds.samples.truncate(l);
    }
    let (network, log) = train(&ds, &model, &cfg, seed)?;
    network.save(&out.join(MODEL_FILE))?;
    write(&out.join("train_log.csv"), log.to_csv().as_bytes())?;
    let last = log.rows.last();
    println!(
        "trained {} on {} samples for {} epochs: loss {:.6}, train NME {:.5}",
        cfg.variant.as_str(),
        ds.len(),
        cfg.epochs,
        last.map_or(f64::NAN, |r| r.loss),
        last.map_or(f64::NAN, |r| r.nme_train)
    );
    Ok(json!({
        "pipeline": cfg,
        "samples": ds.len(),
        "initial_loss": log.initial_loss,
        "final_loss": last.map(|r| r.loss),
        "final_nme_train": log.final_nme(),
    }))
}

fn cmd_eval(s: &mut Settings, a: &EvalArgs, out: &Path) -> CliResult<Value> {
    let data = required(s.path("data", a.data.clone())?, "--data")?;
    let model_path = s.path("model", a.model.clone())?;
    let mean_shape = s.flag("mean_shape", a.mean_shape)?;
    let skip = s.or("skip", a.skip, 0usize)?;
    let limit = s.get("limit", a.limit)?;
    s.finish()?;
    let network = match (&model_path, mean_shape) {
        (Some(_), true) => return Err(usage("--model and --mean-shape are exclusive")),
        (None, false) => return Err(usage("one of --model or --mean-shape is required")),
        (Some(p), false) => Some(Network::<f64>::load(p)?),
        (None, true) => None,
    };
    let (ds, model) = load_dataset(&data)?;
    let end = limit.map_or(ds.len(), |l| (skip + l).min(ds.len()));
    if skip >= end {
        return Err(usage(format!("evaluation set is empty ({} samples, skip {skip})", ds.len())));
    }
    let samples = &ds.samples[skip..end];
    let size = ds.config.image_size;
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut stages: Vec<Vec<f64>> = Vec::new();
    match &network {
        Some(net) => {
            net.check_model(&model)?;
            let cfg = net.config();
            if cfg.image_size != size {
                return Err(Error::Data(format!("network expects {0}×{0} images, dataset has {size}×{size}", cfg.image_size)).into());
            }
            let ctx = AlignmentContext::new(&model, cfg)?;
            for smp in samples {
                let r = net.align(&ctx, &smp.image)?;
                let gt = smp.landmarks_2d();
                let row = std::iter::once(&r.initial)
                    .chain(&r.stages)
                    .map(|p| nme_gt_box(p, &gt))
                    .collect::<Result<Vec<_>, _>>()?;
                per_sample.push(*row.last().expect("final stage"));
                stages.push(row);
            }
        }
        None => {
            let stub: Landmarks2D = model.project_weak_perspective(&model.default_pose(size))?;
            for smp in samples {
                per_sample.push(nme_gt_box(&stub, &smp.landmarks_2d())?);
            }
        }
    }
    let yaws: Vec<f64> = samples.iter().map(|x| x.yaw_deg).collect();
    let mut report = pose_binned_report(&per_sample, &yaws)?;
    if let Some(first) = stages.first() {
        report.stage_mean_nme = (0..first.len())
            .map(|t| stages.iter().map(|r| r[t]).sum::<f64>() / stages.len() as f64)
            .collect();
    }
    write(&out.join("report.json"), report.to_json().as_bytes())?;
    write(&out.join("per_sample.csv"), report.per_sample_csv().as_bytes())?;
    write(&out.join("summary.csv"), report.summary_csv().as_bytes())?;
    write(&out.join("ced.csv"), report.ced_csv().as_bytes())?;
    write(&out.join("ced.svg"), report.ced_svg().as_bytes())?;
    let bin = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
    println!(
        "{} samples: NME {:.4} (yaw [0,30) {}, [30,60) {}, [60,90] {}), failure rate {:.3}",
        per_sample.len(),
        report.mean_nme,
        bin(report.pose_bin_means[0]),
        bin(report.pose_bin_means[1]),
        bin(report.pose_bin_means[2]),
        report.failure_rate
    );
    Ok(json!({
        "predictor": if mean_shape { "mean_shape" } else { "network" },
        "pipeline": network.as_ref().map(|n| n.config().clone()),
        "samples": [skip, end],
    }))
}

fn cmd_bench(s: &mut Settings, a: &BenchArgs, seed: u64, out: &Path) -> CliResult<Value> {
    let model_path = s.path("model", a.model.clone())?;
    let dims = dataset_config(s, &a.shape)?;
    let warmup = s.or("warmup", a.warmup, 3usize)?;
    let iters = s.or("iters", a.iters, 20usize)?;
    let built = match model_path {
        Some(_) => None,
        None => Some(pipeline_config(s, &a.net, &dims)?),
    };
    s.finish()?;
    let network = match (&model_path, built) {
        (Some(p), _) => Network::<f64>::load(p)?,
        (None, Some(cfg)) => Network::new(&cfg, &synthetic_model(&dims)?, seed)?,
        (None, None) => unreachable!("config built when no model is given"),
    };
    let cfg = network.config().clone();
    let dims = DatasetConfig {
        image_size: cfg.image_size,
        landmarks: cfg.landmarks,
        id_dims: cfg.id_dims,
        exp_dims: cfg.exp_dims,
        ..dims
    };
    let model = synthetic_model(&dims)?;
    let sample = generate_synthetic_dataset(&model, 1, seed, &dims)?.samples.remove(0);
    let ctx = AlignmentContext::new(&model, &cfg)?;
    let report = benchmark(&network, &ctx, &sample.image, warmup, iters)?;
    write(&out.join("bench.json"), report.to_json().as_bytes())?;
    println!(
        "{} x{}: {:.1} FPS on 1 thread, {} parameters, {} bytes, {} mult-adds/frame",
        report.variant, report.width_multiplier, report.frames_per_second, report.parameters, report.serialized_bytes, report.mult_adds_per_frame
    );
    Ok(json!({"pipeline": cfg}))
}

#[derive(Serialize)]
struct SeparableSummary {
    min_width: usize,
    separable_mult_adds: u64,
    standard_mult_adds: u64,
    ratio: Option<f64>,
    /// `1/C_out + 1/S_k²` for stride-1 layers of each compared width.
    closed_form: BTreeMap<usize, f64>,
}

fn cmd_cost(s: &mut Settings, a: &CostArgs, out: &Path) -> CliResult<Value> {
    let dims = dataset_config(s, &a.shape)?;
    let cfg = pipeline_config(s, &a.net, &dims)?;
    let min_width = s.or("min_width", a.min_width, 64usize)?;
    s.finish()?;
    let network: Network = Network::new(&cfg, &synthetic_model(&dims)?, 0)?;
    let rows = network.cost_table();
    let sum = total(&rows);
    let mut text = format!("{:<24} {:<10} {:>14} {:>12}\n", "layer", "mode", "mult_adds", "parameters");
    let mut csv = String::from("layer,mode,mult_adds,parameters\n");
    for r in &rows {
        writeln!(text, "{:<24} {:<10} {:>14} {:>12}", r.layer, r.mode, r.mult_adds, r.parameters).expect("string write");
        writeln!(csv, "{},{},{},{}", r.layer, r.mode, r.mult_adds, r.parameters).expect("string write");
    }
    writeln!(text, "{:<24} {:<10} {:>14} {:>12}", "total", "", sum.mult_adds, sum.parameters).expect("string write");
    writeln!(csv, "total,,{},{}", sum.mult_adds, sum.parameters).expect("string write");
    let separable = match &network {
        Network::Fast(n) => {
            let (sep, std) = n.separable_vs_standard(min_width);
            let closed_form = n
                .blocks
                .iter()
                .map(|b| b.pointwise.spec.out_channels)
                .filter(|&c| c >= min_width)
                .map(|c| (c, separable_reduction_ratio(&ConvSpec::standard(cfg.kernel_size, c, c, 1)).value()))
                .collect();
            let ratio = (std > 0).then(|| sep as f64 / std as f64);
            match ratio {
                Some(r) => writeln!(text, "separable / standard mult-adds (width >= {min_width}): {sep} / {std} = {r:.6}"),
                None => writeln!(text, "no separable block is {min_width} channels wide"),
            }
            .expect("string write");
            Some(SeparableSummary {
                min_width,
                separable_mult_adds: sep,
                standard_mult_adds: std,
                ratio,
                closed_form,
            })
        }
        Network::Classic(_) => None,
    };
    print!("{text}");
    write(&out.join("cost.csv"), csv.as_bytes())?;
    let report = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "variant": cfg.variant.as_str(),
        "width_multiplier": cfg.width_multiplier,
        "rows": rows,
        "total": sum,
        "separable": separable,
    });
    write(&out.join("cost.json"), pretty(&report).as_bytes())?;
    Ok(json!({"pipeline": cfg}))
}

fn views(v: &str) -> CliResult<Vec<(&'static str, HeatmapView)>> {
    let all = [
        ("x", HeatmapView::X),
        ("y", HeatmapView::Y),
        ("z", HeatmapView::Z),
        ("composite", HeatmapView::Composite),
    ];
    if v == "all" {
        return Ok(all.to_vec());
    }
    all.iter()
        .find(|(n, _)| *n == v)
        .map(|&x| vec![x])
        .ok_or_else(|| usage(format!("unknown view `{v}`")))
}

fn write_maps(out: &Path, stem: &str, map: &DiffusionHeatMap, views: &[(&str, HeatmapView)]) -> CliResult<Vec<String>> {
    let mut files = Vec::new();
    for (name, view) in views {
        let file = format!("{stem}_{name}.ppm");
        write(&out.join(&file), &map.to_ppm(*view))?;
        files.push(file);
    }
    Ok(files)
}

fn cmd_export_heatmap(s: &mut Settings, a: &ExportArgs, out: &Path) -> CliResult<Value> {
    let data = s.path("data", a.data.clone())?;
    let dims = dataset_config(s, &a.shape)?;
    let sigma = s.or("sigma", a.sigma, crate::diffusion_heatmap::DEFAULT_SIGMA)?;
    let view = s.or("view", a.view.clone(), "composite".to_string())?;
    let network_path = s.path("model", a.model.clone())?;
    let sample = s.get("sample", a.sample)?;
    s.finish()?;
    let views = views(&view)?;
    let (dataset, model, size) = match &data {
        Some(d) => {
            let (ds, m) = load_dataset(d)?;
            let size = ds.config.image_size;
            (Some(ds), m, size)
        }
        None => (None, synthetic_model(&dims)?, dims.image_size),
    };
    let mean = mean_initial_heatmap(&model, &model.default_pose(size), (size, size), sigma)?;
    let mut files = write_maps(out, "heatmap_mean", &mean, &views)?;
    let mut distances = Vec::new();
    if let Some(p) = network_path {
        let ds = dataset.as_ref().ok_or_else(|| usage("--model needs --data"))?;
        let i = required(sample, "--sample")?;
        let smp = ds
            .samples
            .get(i)
            .ok_or_else(|| usage(format!("sample {i} out of range (dataset has {})", ds.len())))?;
        let net = Network::<f64>::load(&p)?;
        net.check_model(&model)?;
        let ctx = AlignmentContext::new(&model, net.config())?;
        let before = smp.image.clone();
        let r = net.align(&ctx, &smp.image)?;
        if before.data().iter().zip(smp.image.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::NonFinite("input image changed during alignment".into()).into());
        }
        write(&out.join("image.ppm"), &encode_ppm(&smp.image)?)?;
        files.push("image.ppm".into());
        for (t, map) in r.heatmaps.iter().enumerate() {
            files.extend(write_maps(out, &format!("heatmap_iter{t}"), map, &views)?);
        }
        distances = r.heatmaps.windows(2).map(|w| w[0].l2_distance(&w[1])).collect();
    }
    let summary = json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "files": files,
        "consecutive_l2": distances,
    });
    write(&out.join("heatmaps.json"), pretty(&summary).as_bytes())?;
    println!("wrote {} heat-map images to {}", files.len(), out.display());
    Ok(json!({"image_size": size, "sigma": sigma}))
}
