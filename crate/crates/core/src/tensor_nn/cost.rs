//! Analytic multiply-accumulate and parameter counts.
//!
//! For a stride-1 "same" layer on an `S_F × S_F` feature map:
//!
//! | mode      | mult-adds                        | parameters          |
//! |-----------|----------------------------------|---------------------|
//! | standard  | `S_F²·S_k²·C_in·C_out`           | `S_k²·C_in·C_out`   |
//! | depthwise | `S_F²·S_k²·C_out`                | `S_k²·C_out`        |
//! | pointwise | `S_F²·C_in·C_out`                | `C_in·C_out`        |
//!
//! Biases are never counted. Strided layers use the output size in place
//! of `S_F`. Counts are mult-adds, not FLOPs.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::conv::{ConvMode, ConvSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub mult_adds: u64,
    pub parameters: u64,
}

impl std::ops::Add for CostReport {
    type Output = CostReport;

    fn add(self, rhs: CostReport) -> CostReport {
        CostReport {
            mult_adds: self.mult_adds + rhs.mult_adds,
            parameters: self.parameters + rhs.parameters,
        }
    }
}

impl std::iter::Sum for CostReport {
    fn sum<I: Iterator<Item = CostReport>>(iter: I) -> Self {
        iter.fold(CostReport::default(), |a, b| a + b)
    }
}

/// Cost of `spec` producing an `S_F × S_F` output map.
pub fn cost_of(spec: &ConvSpec, feature_size: usize) -> CostReport {
    cost_of_rect(spec, feature_size, feature_size)
}

/// Cost of `spec` producing an `out_h × out_w` output map.
pub fn cost_of_rect(spec: &ConvSpec, out_h: usize, out_w: usize) -> CostReport {
    let area = (out_h * out_w) as u64;
    let k2 = (spec.kernel_size * spec.kernel_size) as u64;
    let (cin, cout) = (spec.in_channels as u64, spec.out_channels as u64);
    let parameters = match spec.mode {
        ConvMode::Depthwise => k2 * cout,
        ConvMode::Pointwise => cin * cout,
        ConvMode::Standard => k2 * cin * cout,
    };
    CostReport {
        mult_adds: area * parameters,
        parameters,
    }
}

/// Cost of a fully-connected layer (one mult-add per weight).
pub fn cost_of_dense(inputs: usize, outputs: usize) -> CostReport {
    let n = (inputs * outputs) as u64;
    CostReport {
        mult_adds: n,
        parameters: n,
    }
}

/// Exact non-negative rational number in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub numer: u64,
    pub denom: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Fraction {
    pub fn new(numer: u64, denom: u64) -> Self {
        assert!(denom != 0, "zero denominator");
        let g = gcd(numer, denom).max(1);
        Fraction {
            numer: numer / g,
            denom: denom / g,
        }
    }

    pub fn value(&self) -> f64 {
        self.numer as f64 / self.denom as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer, self.denom)
    }
}

/// The depthwise + pointwise pair that factorizes a standard convolution.
/// Striding moves onto the depthwise half.
pub fn separable_pair(spec: &ConvSpec) -> (ConvSpec, ConvSpec) {
    (
        ConvSpec::depthwise(spec.kernel_size, spec.in_channels, spec.stride),
        ConvSpec::pointwise(spec.in_channels, spec.out_channels),
    )
}

/// `(depthwise + pointwise) / standard` mult-adds, which reduces to
/// `1/C_out + 1/S_k²` independently of the feature size.
pub fn separable_reduction_ratio(spec: &ConvSpec) -> Fraction {
    let k2 = (spec.kernel_size * spec.kernel_size) as u64;
    let cout = spec.out_channels as u64;
    Fraction::new(k2 + cout, k2 * cout)
}

/// One row of a cost table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub mode: String,
    pub mult_adds: u64,
    pub parameters: u64,
}

impl LayerCost {
    pub fn new(layer: impl Into<String>, mode: &str, cost: CostReport) -> Self {
        LayerCost {
            layer: layer.into(),
            mode: mode.to_string(),
            mult_adds: cost.mult_adds,
            parameters: cost.parameters,
        }
    }

    pub fn report(&self) -> CostReport {
        CostReport {
            mult_adds: self.mult_adds,
            parameters: self.parameters,
        }
    }
}

pub fn total(rows: &[LayerCost]) -> CostReport {
    rows.iter().map(LayerCost::report).sum()
}
