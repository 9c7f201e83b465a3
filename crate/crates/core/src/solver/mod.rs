//! Levenberg-Marquardt over factor graphs and the optimization problems built
//! on it.

mod lm;
mod problems;

pub use lm::{lm_minimize, LmConfig, LmResult, LmStatus, LmStep, Problem, RelinThresholds};
pub use problems::*;
