use nalgebra::{SMatrix, SVector, Vector3};

use super::preint::{ImuPreintegration, GRAVITY};
use crate::geom::{skew, so3_right_jacobian, so3_right_jacobian_inv, Pose, Rotation};

pub type Vector9 = SVector<f64, 9>;
pub type Matrix9x9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;

/// Pose and world-frame velocity of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
}

/// Jacobians of the IMU residual. Frame blocks are ordered
/// `(omega, dC, dv)` with `R <- Exp(omega) R`; the bias block is `(bg, ba)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuJacobians {
    pub frame_i: Matrix9x9,
    pub frame_j: Matrix9x9,
    pub bias: Matrix9x6,
}

/// Stacked `(rotation, velocity, position)` mismatch between the state
/// transition from `i` to `j` under gravity and the preintegrated deltas,
/// bias-corrected to first order.
pub fn imu_residual(
    si: &NavState,
    sj: &NavState,
    pre: &ImuPreintegration,
    bias_gyro: &Vector3<f64>,
    bias_accel: &Vector3<f64>,
) -> Vector9 {
    imu_residual_with_jacobians(si, sj, pre, bias_gyro, bias_accel).0
}

pub fn imu_residual_with_jacobians(
    si: &NavState,
    sj: &NavState,
    pre: &ImuPreintegration,
    bias_gyro: &Vector3<f64>,
    bias_accel: &Vector3<f64>,
) -> (Vector9, ImuJacobians) {
    let dt = pre.dt;
    let dbg = bias_gyro - pre.bias_gyro;
    let dba = bias_accel - pre.bias_accel;
    let ri = si.pose.rotation().matrix();
    let rj_m = sj.pose.rotation().matrix();

    let phi_b = pre.j_r_bg * dbg;
    let corrected = pre.delta_r * Rotation::exp(&phi_b);
    // Relative rotation error: corrected^T * W_i^T * W_j with W = R^T.
    let m = corrected.matrix().transpose() * ri * rj_m.transpose();
    let e = Rotation::from_matrix(&m);
    let r_rot = e.log();

    let pi = si.pose.center();
    let pj = sj.pose.center();
    let a_v = ri * (sj.velocity - si.velocity - GRAVITY * dt);
    let a_p = ri * (pj - pi - si.velocity * dt - GRAVITY * (0.5 * dt * dt));
    let r_v = a_v - (pre.delta_v + pre.j_v_bg * dbg + pre.j_v_ba * dba);
    let r_p = a_p - (pre.delta_p + pre.j_p_bg * dbg + pre.j_p_ba * dba);

    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_v);
    r.fixed_rows_mut::<3>(6).copy_from(&r_p);

    let jr_inv = so3_right_jacobian_inv(&r_rot);
    let mut ji = Matrix9x9::zeros();
    let mut jj = Matrix9x9::zeros();
    let mut jb = Matrix9x6::zeros();

    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr_inv * rj_m * ri.transpose()));
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv));
    let exp_t = e.matrix().transpose();
    jb.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_inv * exp_t * so3_right_jacobian(&phi_b) * pre.j_r_bg));

    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&a_v)));
    ji.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-ri));
    jj.fixed_view_mut::<3, 3>(3, 6).copy_from(&ri);
    jb.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-pre.j_v_bg));
    jb.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-pre.j_v_ba));

    ji.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-skew(&a_p)));
    ji.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-ri));
    ji.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-ri * dt));
    jj.fixed_view_mut::<3, 3>(6, 3).copy_from(&ri);
    jb.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-pre.j_p_bg));
    jb.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-pre.j_p_ba));

    (r, ImuJacobians { frame_i: ji, frame_j: jj, bias: jb })
}
