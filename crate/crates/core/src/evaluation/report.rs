use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{ced_curve, default_ced_grid, failure_rate, mean, FAILURE_THRESHOLD};
use crate::alignment_pipeline::{yaw_bin, YAW_BIN_EDGES};
use crate::error::{contract, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Per-sample NME with its pose-binned summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmeReport {
    pub schema_version: u32,
    pub per_sample_nme: Vec<f64>,
    pub yaw_deg: Vec<f64>,
    pub mean_nme: f64,
    /// Means over |yaw| in [0, 30), [30, 60), [60, 90]; `None` for an empty bin.
    pub pose_bin_means: [Option<f64>; 3],
    pub pose_bin_counts: [usize; 3],
    pub failure_threshold: f64,
    pub failure_rate: f64,
    pub ced: Vec<(f64, f64)>,
    /// Mean NME of the initial landmarks and of every recurrence step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_mean_nme: Vec<f64>,
}

pub fn pose_binned_report(per_sample_nme: &[f64], yaw_deg: &[f64]) -> Result<NmeReport> {
    contract!(!per_sample_nme.is_empty(), "report needs at least one sample");
    contract!(
        per_sample_nme.len() == yaw_deg.len(),
        "{} NME values but {} yaw angles",
        per_sample_nme.len(),
        yaw_deg.len()
    );
    let mut bins: [Vec<f64>; 3] = Default::default();
    for (&e, &y) in per_sample_nme.iter().zip(yaw_deg) {
        bins[yaw_bin(y)].push(e);
    }
    Ok(NmeReport {
        schema_version: REPORT_SCHEMA_VERSION,
        per_sample_nme: per_sample_nme.to_vec(),
        yaw_deg: yaw_deg.to_vec(),
        mean_nme: mean(per_sample_nme).expect("non-empty"),
        pose_bin_means: [mean(&bins[0]), mean(&bins[1]), mean(&bins[2])],
        pose_bin_counts: [bins[0].len(), bins[1].len(), bins[2].len()],
        failure_threshold: FAILURE_THRESHOLD,
        failure_rate: failure_rate(per_sample_nme, FAILURE_THRESHOLD),
        ced: ced_curve(per_sample_nme, &default_ced_grid())?,
        stage_mean_nme: Vec::new(),
    })
}

impl NmeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `index,yaw_deg,yaw_bin,nme` rows.
    pub fn per_sample_csv(&self) -> String {
        let mut s = String::from("index,yaw_deg,yaw_bin,nme\n");
        for (i, (e, y)) in self.per_sample_nme.iter().zip(&self.yaw_deg).enumerate() {
            writeln!(s, "{i},{y},{},{e}", yaw_bin(*y)).expect("string write");
        }
        s
    }

    /// One summary row in the layout of a results table.
    pub fn summary_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let head = YAW_BIN_EDGES
            .iter()
            .enumerate()
            .map(|(i, e)| format!("yaw_{}_{}", [0.0, 30.0, 60.0][i], e))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{head},mean,failure_rate\n{},{},{},{},{}\n",
            cell(self.pose_bin_means[0]),
            cell(self.pose_bin_means[1]),
            cell(self.pose_bin_means[2]),
            self.mean_nme,
            self.failure_rate
        )
    }

    pub fn ced_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in &self.ced {
            writeln!(s, "{t},{f}").expect("string write");
        }
        s
    }

    pub fn ced_svg(&self) -> String {
        ced_svg(&self.ced)
    }
}

/// Line plot of a CED curve as a standalone SVG document.
pub fn ced_svg(curve: &[(f64, f64)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 40.0;
    let t_max = curve.iter().map(|p| p.0).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let x = |t: f64| M + t / t_max * (W - 2.0 * M);
    let y = |f: f64| H - M - f * (H - 2.0 * M);
    let points = curve
        .iter()
        .map(|&(t, f)| format!("{:.2},{:.2}", x(t), y(f)))
        .collect::<Vec<_>>()
        .join(" ");
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{M},{M} L{M},{b} L{r},{b}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    )
    .unwrap();
    let tx = x(FAILURE_THRESHOLD.min(t_max));
    writeln!(
        s,
        r#"<line x1="{tx:.2}" y1="{M}" x2="{tx:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        H - M
    )
    .unwrap();
    writeln!(s, r#"<polyline points="{points}" fill="none" stroke="steelblue" stroke-width="2"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">NME</text>"#, W / 2.0, H - 8.0).unwrap();
    writeln!(s, r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})" text-anchor="middle">fraction of samples</text>"#, H / 2.0, H / 2.0).unwrap();
    writeln!(s, r#"<text x="{M}" y="{}" font-size="10">0</text>"#, H - M + 14.0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{t_max}</text>"#, W - M, H - M + 14.0).unwrap();
    s.push_str("</svg>\n");
    s
}
