//! NME / CED metrics, pose-binned reports and the efficiency benchmark.

mod bench;
mod metrics;
mod report;

pub use bench::{benchmark, BenchReport, CLASSIC_BOUNDARY, FAST_BOUNDARY};
pub use metrics::{
    bbox_from_landmarks, ced_curve, default_ced_grid, failure_rate, mean, nme, nme_gt_box, CED_MAX_MILLI,
    CED_POINTS, FAILURE_THRESHOLD,
};
pub use report::{ced_svg, pose_binned_report, NmeReport, REPORT_SCHEMA_VERSION};
