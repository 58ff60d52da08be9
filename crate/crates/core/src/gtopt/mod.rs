//! Reference-trajectory optimization and map alignment.
//!
//! A [`TrajectoryProblem`] couples per-frame camera poses and velocities,
//! a global IMU bias pair and optimized VO landmarks through five residual
//! families: reprojection against fixed map points, reprojection of VO
//! landmarks, IMU preintegration, RTK horizontal position and gravity
//! direction. [`solve`] minimizes their weighted sum with Levenberg-Marquardt,
//! eliminating landmarks by Schur complement. [`rigid_align`] registers two
//! metric point clouds with Kabsch inside an ICP loop.

mod align;
mod imu;
mod preint;
mod problem;
mod residuals;
mod solver;
pub mod synth;

use thiserror::Error;

pub use align::{pair_rmse, rigid_align, Alignment, IcpOptions};

pub use imu::{imu_residual, imu_residual_with_jacobians, ImuJacobians, NavState};
pub use preint::{preintegrate, ImuNoise, ImuPreintegration, ImuSample, GRAVITY};
pub use problem::{write_tum, Frame, ImuSegment, Observation, Point3, ProblemError, TrajectoryProblem};
pub use residuals::{
    apply_update, build_residuals, tangent_basis, ParamBlock, ResidualBlock, ResidualSet, ResidualWeights, Term,
};
pub use solver::{solve, LmStep, SolveOptions, SolveReport, Termination};

#[derive(Debug, Error)]
pub enum GtoptError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("invalid options: {0}")]
    Options(String),
    #[error("degenerate alignment: {0}")]
    Degenerate(String),
}
