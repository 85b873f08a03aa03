//! Grasp-to-camera coordinate alignment from an uncalibrated RGB camera.
//!
//! The pipeline fuses pairwise pointmaps into one reconstruction, reads
//! per-image camera-object poses off the result, and then recovers the
//! end-effector-to-object transform and metric scale by matching renders.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod coord_align;
pub mod error;
pub mod evaluation;
pub mod kinematics;
pub mod metrics;
pub mod ope;
mod optim;
pub mod ply;
pub mod pointmap;
pub mod raster;
pub mod se3;
pub mod synth;

pub use coord_align::{AlignSolverOptions, AlignmentProblem, AlignmentSolution};
pub use error::{Error, Result};
pub use ope::CameraObjectPose;
pub use pointmap::{global_align, GlobalAlignOptions, GlobalAlignmentResult, PairPrediction};
pub use se3::{DenseCloud, Intrinsics, Rotation3, Transform3};
