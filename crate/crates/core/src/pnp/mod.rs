//! Absolute pose from 2D-3D correspondences: P3P minimal solver, LO-RANSAC
//! with an optional gravity gate, and Levenberg-Marquardt pose refinement.

mod p3p;
mod ransac;
mod refine;

use nalgebra::{Point2, Vector3};
use thiserror::Error;

use crate::geom::{angular_diff, CameraIntrinsics, Pose};

pub use p3p::p3p_solve;
pub use ransac::{adaptive_bound, count_inliers, lo_ransac, RansacConfig, RansacReport};
pub use refine::{refine_pose, reprojection_cost, RefineOptions, RefineOutcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub pixel: Point2<f64>,
    pub point: Vector3<f64>,
    pub confidence: f64,
}

impl Correspondence2D3D {
    pub fn new(pixel: Point2<f64>, point: Vector3<f64>, confidence: f64) -> Self {
        Self { pixel, point, confidence }
    }

    pub fn in_bounds(&self, intrinsics: &CameraIntrinsics) -> bool {
        intrinsics.contains(&self.pixel)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PnpError {
    #[error("degenerate sample")]
    Degenerate,
    #[error("need at least {needed} correspondences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("invalid RANSAC config: {0}")]
    Config(String),
    #[error("no hypothesis reached 4 inliers (best {best_inliers})")]
    NoConsensus { best_inliers: usize, iterations: usize, hypotheses_scored: usize, hypotheses_gated: usize },
}

/// Angle in degrees between the gravity directions implied by two poses.
pub fn gravity_residual(hypothesis: &Pose, sensor: &Pose) -> f64 {
    angular_diff(&sensor.gravity_dir(), &hypothesis.gravity_dir())
}
