//! Recurrent regressors: the parameter-space vanilla RNN and the factorized
//! feature-space recurrent cell.

mod fast;
mod vanilla;

pub use fast::{
    backward as fast_backward, fast_recurrent_init, fast_recurrent_step, unroll as fast_unroll, FastRecurrentCell,
    FastTrace,
};
pub use vanilla::{vanilla_step, IncrementSource, VanillaRnnCell, VanillaTrace};

/// Default number of unrolled steps.
pub const DEFAULT_STEPS: usize = 4;
