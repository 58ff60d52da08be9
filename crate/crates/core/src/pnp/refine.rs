use nalgebra::{Matrix6, Vector2, Vector3, Vector6};

use super::{Correspondence2D3D, PnpError};
use crate::geom::{skew, CameraIntrinsics, Pose, MIN_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub max_iters: usize,
    pub initial_lambda: f64,
    pub gradient_tol: f64,
    pub relative_tol: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { max_iters: 50, initial_lambda: 1e-4, gradient_tol: 1e-10, relative_tol: 1e-14 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration budget ran out before a stopping criterion.
    pub converged: bool,
}

/// Sum of squared reprojection errors, or `None` if any point is behind the
/// camera.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence2D3D], intrinsics: &CameraIntrinsics) -> Option<f64> {
    let mut cost = 0.0;
    for c in corrs {
        let px = intrinsics.project_camera(&pose.transform(&c.point))?;
        cost += (px - c.pixel).norm_squared();
    }
    Some(cost)
}

fn normal_equations(pose: &Pose, corrs: &[Correspondence2D3D], k: &CameraIntrinsics) -> (Matrix6<f64>, Vector6<f64>) {
    let r = pose.rotation().matrix();
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corrs {
        let xc = pose.transform(&c.point);
        let jp = k.projection_jacobian(&xc);
        let px = k.project_camera(&xc).expect("active points are in front");
        let res: Vector2<f64> = px - c.pixel;
        let mut j = nalgebra::Matrix2x6::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&xc)));
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * -r));
        h += j.transpose() * j;
        g += j.transpose() * res;
    }
    (h, g)
}

/// Levenberg-Marquardt over `(omega, dC)` with `R <- Exp(omega) R`,
/// `C <- C + dC`. Points behind the initial pose are ignored; steps that push
/// an active point behind the camera are rejected.
pub fn refine_pose(
    pose: &Pose,
    inliers: &[Correspondence2D3D],
    intrinsics: &CameraIntrinsics,
    opts: &RefineOptions,
) -> Result<RefineOutcome, PnpError> {
    if inliers.len() < 4 {
        return Err(PnpError::TooFew { needed: 4, got: inliers.len() });
    }
    let active: Vec<Correspondence2D3D> =
        inliers.iter().filter(|c| pose.transform(&c.point).z > MIN_DEPTH).copied().collect();
    let mut cur = *pose;
    let Some(mut cost) = reprojection_cost(&cur, &active, intrinsics) else { unreachable!() };
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = opts.initial_lambda;
    let mut converged = active.len() < 4;
    let mut iterations = 0;
    while !converged && iterations < opts.max_iters {
        iterations += 1;
        let (h, g) = normal_equations(&cur, &active, intrinsics);
        if g.amax() <= opts.gradient_tol || cost == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-9);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dc = Vector3::new(step[3], step[4], step[5]);
            let cand = cur.retract(&omega, &dc);
            match reprojection_cost(&cand, &active, intrinsics) {
                Some(c) if c < cost => {
                    let rel = (cost - c) / cost;
                    cur = cand;
                    cost = c;
                    history.push(c);
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if rel <= opts.relative_tol {
                        converged = true;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            // No descent direction left at any damping: a numerical minimum.
            converged = true;
        }
    }
    if !converged {
        log::warn!("pose refinement stopped after {iterations} iterations without converging");
    }
    Ok(RefineOutcome { pose: cur, initial_cost, final_cost: cost, cost_history: history, iterations, converged })
}
