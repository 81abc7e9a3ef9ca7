//! Stereo visual odometry with surface-normal constraints for near-planar
//! scenes.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: SE(3) exponential/logarithm, stereo projection and triangulation.
//! - [`factors`]: reprojection and tangent-plane normal residuals, Huber loss, Jacobians.
//! - [`estimator`]: pose-only tracking, keyframes, covisibility, local bundle adjustment.
//! - [`simulator`]: synthetic planar scenes, flight trajectories and stereo observations.
//! - [`evaluation`]: trajectory alignment, ATE/RDE metrics and report tables.
//! - [`cli`]: configuration, on-disk formats and the command implementations.
//!
//! The guide in `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod estimator;
pub mod evaluation;
pub mod factors;
pub mod geometry;
pub mod simulator;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/normal-factor.md")]
    mod normal_factor {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
