use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::REPORT_SCHEMA_VERSION;
use crate::alignment_pipeline::{classic_forward, fast_forward, AlignmentContext, AlignmentResult, Network};
use crate::diffusion_heatmap::mean_initial_heatmap;
use crate::error::{contract, Result};
use crate::serialization::DType;
use crate::tensor_nn::{total, Tensor};

/// What one timed frame covers.
pub const FAST_BOUNDARY: &str = "mean heat-map rasterization + input stack + CNN + recurrent cell + head; excludes model load and image decode";
pub const CLASSIC_BOUNDARY: &str =
    "per-iteration heat-map rasterization + input stack + CNN + RNN; excludes model load and image decode";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub variant: String,
    pub width_multiplier: usize,
    pub precision: String,
    pub threads: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub frames_per_second: f64,
    pub seconds_per_frame: f64,
    pub parameters: u64,
    pub serialized_bytes: u64,
    pub mult_adds_per_frame: u64,
    pub boundary: String,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn frame(network: &Network<f32>, ctx: &AlignmentContext, image: &Tensor<f64>) -> Result<AlignmentResult> {
    match network {
        Network::Fast(n) => {
            let size = n.config.image_size;
            let map = mean_initial_heatmap(&ctx.model, &ctx.initial_params, (size, size), n.config.sigma)?;
            fast_forward(n, image, &map)
        }
        Network::Classic(n) => classic_forward(n, &ctx.model, image, &ctx.initial_params),
    }
}

/// Times `iters` f32 forward passes on the calling thread after `warmup`
/// untimed ones.
pub fn benchmark(
    network: &Network,
    ctx: &AlignmentContext,
    image: &Tensor<f64>,
    warmup: usize,
    iters: usize,
) -> Result<BenchReport> {
    contract!(iters >= 10, "benchmark needs at least 10 iterations, got {iters}");
    let config = network.config();
    let f32_net: Network<f32> = network.cast();
    let mut mult_adds = 0;
    for _ in 0..warmup {
        mult_adds = frame(&f32_net, ctx, image)?.mult_adds;
    }
    let start = Instant::now();
    for _ in 0..iters {
        mult_adds = std::hint::black_box(frame(&f32_net, ctx, image)?).mult_adds;
    }
    let seconds = start.elapsed().as_secs_f64();
    let seconds_per_frame = seconds / iters as f64;
    let boundary = match network {
        Network::Fast(_) => FAST_BOUNDARY,
        Network::Classic(_) => CLASSIC_BOUNDARY,
    };
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        variant: config.variant.as_str().to_string(),
        width_multiplier: config.width_multiplier,
        precision: "f32".into(),
        threads: 1,
        warmup,
        iterations: iters,
        frames_per_second: 1.0 / seconds_per_frame.max(f64::MIN_POSITIVE),
        seconds_per_frame,
        parameters: total(&network.cost_table()).parameters,
        serialized_bytes: f32_net.to_chunk_file(DType::F32).to_bytes().len() as u64,
        mult_adds_per_frame: mult_adds,
        boundary: boundary.into(),
    })
}
