//! Causal effects of a binary treatment on a continuous outcome under
//! principal stratification with a binary post-treatment usage variable.
//!
//! The pipeline: fit a propensity score ([`propensity`]), fit the stratum and
//! outcome models conditional on it by EM ([`em`]), derive complier effects
//! ([`estimands`]), and sweep the sensitivity parameters ([`sensitivity`]).
//! [`simulate`] generates data with known truth for all of the above.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod em;
pub mod estimands;
pub mod glm;
pub mod math;
pub mod model;
pub mod propensity;
pub mod sensitivity;
pub mod simulate;

pub use data::{load_dataset, write_dataset, Dataset, StratumLabel, Unit};
pub use em::{fit_em, FitOptions, FitResult};
pub use model::{ModelParams, ModelSpec, ParamId, SensitivityConfig, XiMode};
