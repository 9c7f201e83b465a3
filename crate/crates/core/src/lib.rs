//! Factor-graph backend for monocular dense SLAM: Lie-group geometry, compact
//! depth codes, the pair-wise and prior factors, a Levenberg-Marquardt solver,
//! keyframing and loop closure, a synthetic scene generator and trajectory
//! and depth metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod cli;
pub mod depth;
pub mod error;
pub mod eval;
pub mod factors;
pub mod flow;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod map;
pub mod matching;
pub mod sim;
pub mod slam;
pub mod solver;

pub use camera::Camera;
pub use depth::DepthPrior;
pub use error::{Error, Result};
pub use frame::Frame;
pub use geometry::Pose;
pub use map::{DenseMap, FeaturePyramid};
