use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3x2, Vector3};
use serde::{Deserialize, Serialize};

use super::imu::{imu_residual_with_jacobians, NavState};
use super::problem::{Observation, TrajectoryProblem};
use super::GtoptError;
use crate::geom::{skew, Pose, UnitVec3, MIN_DEPTH};

/// Term weights `w_*` and noise scales `sigma_*`. Each term contributes
/// `w * |r / sigma|^2`, so only `w / sigma^2` matters. Reprojection sigmas
/// are pixels, RTK meters, gravity radians; the IMU sigma applies to the
/// stacked rotation/velocity/position residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualWeights {
    pub w_sl: f64,
    pub w_vo: f64,
    pub w_io: f64,
    pub w_t: f64,
    pub w_g: f64,
    pub sigma_sl: f64,
    pub sigma_vo: f64,
    pub sigma_io: f64,
    pub sigma_t: f64,
    pub sigma_g: f64,
}

impl Default for ResidualWeights {
    fn default() -> Self {
        Self {
            w_sl: 1.0,
            w_vo: 1.0,
            w_io: 1.0,
            w_t: 1.0,
            w_g: 1.0,
            sigma_sl: 1.0,
            sigma_vo: 1.0,
            sigma_io: 1e-3,
            sigma_t: 0.02,
            sigma_g: 0.1f64.to_radians(),
        }
    }
}

impl ResidualWeights {
    pub fn only(term: Term) -> Self {
        let mut w = Self { w_sl: 0.0, w_vo: 0.0, w_io: 0.0, w_t: 0.0, w_g: 0.0, ..Self::default() };
        *w.weight_mut(term) = 1.0;
        w
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::SelfLocalization => self.w_sl,
            Term::VisualOdometry => self.w_vo,
            Term::Imu => self.w_io,
            Term::Rtk => self.w_t,
            Term::Gravity => self.w_g,
        }
    }

    pub fn weight_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::SelfLocalization => &mut self.w_sl,
            Term::VisualOdometry => &mut self.w_vo,
            Term::Imu => &mut self.w_io,
            Term::Rtk => &mut self.w_t,
            Term::Gravity => &mut self.w_g,
        }
    }

    pub fn sigma(&self, term: Term) -> f64 {
        match term {
            Term::SelfLocalization => self.sigma_sl,
            Term::VisualOdometry => self.sigma_vo,
            Term::Imu => self.sigma_io,
            Term::Rtk => self.sigma_t,
            Term::Gravity => self.sigma_g,
        }
    }

    pub fn validate(&self) -> Result<(), GtoptError> {
        for t in Term::ALL {
            let (w, s) = (self.weight(t), self.sigma(t));
            if !(w >= 0.0) || !w.is_finite() {
                return Err(GtoptError::Weights(format!("{t:?} weight must be finite and >= 0")));
            }
            if w > 0.0 && !(s > 0.0 && s.is_finite()) {
                return Err(GtoptError::Weights(format!("{t:?} sigma must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    SelfLocalization,
    VisualOdometry,
    Imu,
    Rtk,
    Gravity,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::SelfLocalization, Term::VisualOdometry, Term::Imu, Term::Rtk, Term::Gravity];

    pub fn is_reprojection(self) -> bool {
        matches!(self, Term::SelfLocalization | Term::VisualOdometry)
    }
}

/// Parameter blocks: a frame is `(omega, dC, dv)`, the bias block is
/// `(bg, ba)`, a landmark is its 3D position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    Frame(usize),
    Bias,
    Landmark(usize),
}

impl ParamBlock {
    pub fn dim(self) -> usize {
        match self {
            ParamBlock::Frame(_) => 9,
            ParamBlock::Bias => 6,
            ParamBlock::Landmark(_) => 3,
        }
    }
}

/// One residual block: the residual divided by its sigma (`whitened`) and
/// the Jacobians of that whitened residual per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub term: Term,
    /// Observation, segment or measurement index within the term.
    pub index: usize,
    pub weight: f64,
    pub whitened: DVector<f64>,
    pub jacobians: Vec<(ParamBlock, DMatrix<f64>)>,
}

impl ResidualBlock {
    /// `w * rho(|u|^2)`, with Huber at `huber` sigmas on reprojection terms.
    pub fn cost(&self, huber: Option<f64>) -> f64 {
        let s = self.whitened.norm_squared();
        match huber {
            Some(k) if self.term.is_reprojection() && s > k * k => self.weight * (2.0 * k * s.sqrt() - k * k),
            _ => self.weight * s,
        }
    }

    /// IRLS weight `w * rho'(|u|^2)`.
    pub fn irls_weight(&self, huber: Option<f64>) -> f64 {
        let s = self.whitened.norm_squared();
        match huber {
            Some(k) if self.term.is_reprojection() && s > k * k => self.weight * k / s.sqrt(),
            _ => self.weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualSet {
    pub blocks: Vec<ResidualBlock>,
    /// Reprojection observations skipped because the point is behind the camera.
    pub dropped: usize,
}

impl ResidualSet {
    pub fn cost(&self, huber: Option<f64>) -> f64 {
        self.blocks.iter().map(|b| b.cost(huber)).sum()
    }

    pub fn term_cost(&self, term: Term, huber: Option<f64>) -> f64 {
        self.blocks.iter().filter(|b| b.term == term).map(|b| b.cost(huber)).sum()
    }
}

/// Orthonormal basis of the plane perpendicular to `g`, as columns.
pub fn tangent_basis(g: &UnitVec3) -> Matrix3x2<f64> {
    let a = if g.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = g.cross(&a).normalize();
    let b2 = g.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

fn reprojection(
    pose: &Pose,
    point: &Vector3<f64>,
    obs: &Observation,
    problem: &TrajectoryProblem,
) -> Option<(nalgebra::Vector2<f64>, Matrix2x3<f64>, Matrix2x3<f64>, Matrix2x3<f64>)> {
    let xc = pose.transform(point);
    if xc.z <= MIN_DEPTH {
        return None;
    }
    let k = &problem.camera;
    let px = k.project_camera(&xc)?;
    let jp = k.projection_jacobian(&xc);
    let r = pose.rotation().matrix();
    Some((px - obs.pixel, jp * -skew(&xc), jp * -r, jp * r))
}

/// Evaluates every enabled residual term. Jacobians are left empty when
/// `with_jacobians` is false.
pub fn build_residuals(problem: &TrajectoryProblem, weights: &ResidualWeights, with_jacobians: bool) -> ResidualSet {
    let mut set = ResidualSet::default();
    let jac = |m: DMatrix<f64>| if with_jacobians { m } else { DMatrix::zeros(0, 0) };

    for (term, list) in [(Term::SelfLocalization, &problem.obs_sl), (Term::VisualOdometry, &problem.obs_vo)] {
        let w = weights.weight(term);
        if w == 0.0 {
            continue;
        }
        let inv = 1.0 / weights.sigma(term);
        for (idx, o) in list.iter().enumerate() {
            let pose = &problem.frames[o.frame].pose;
            let point = match term {
                Term::SelfLocalization => problem.map_points[o.point].position,
                _ => problem.landmarks[o.point].position,
            };
            let Some((r, j_w, j_c, j_x)) = reprojection(pose, &point, o, problem) else {
                set.dropped += 1;
                continue;
            };
            let mut jacobians = Vec::new();
            if with_jacobians {
                let mut jf = DMatrix::zeros(2, 9);
                jf.view_mut((0, 0), (2, 3)).copy_from(&(j_w * inv));
                jf.view_mut((0, 3), (2, 3)).copy_from(&(j_c * inv));
                jacobians.push((ParamBlock::Frame(o.frame), jf));
                if term == Term::VisualOdometry {
                    jacobians.push((ParamBlock::Landmark(o.point), DMatrix::from_fn(2, 3, |a, b| j_x[(a, b)] * inv)));
                }
            }
            set.blocks.push(ResidualBlock {
                term,
                index: idx,
                weight: w,
                whitened: DVector::from_column_slice((r * inv).as_slice()),
                jacobians,
            });
        }
    }

    if weights.w_io > 0.0 {
        let inv = 1.0 / weights.sigma_io;
        for (i, seg) in problem.imu.iter().enumerate() {
            let (fi, fj) = (&problem.frames[i], &problem.frames[i + 1]);
            let si = NavState { pose: fi.pose, velocity: fi.velocity };
            let sj = NavState { pose: fj.pose, velocity: fj.velocity };
            let (r, j) = imu_residual_with_jacobians(&si, &sj, &seg.preint, &problem.bias_gyro, &problem.bias_accel);
            let jacobians = if with_jacobians {
                vec![
                    (ParamBlock::Frame(i), jac(DMatrix::from_fn(9, 9, |a, b| j.frame_i[(a, b)] * inv))),
                    (ParamBlock::Frame(i + 1), jac(DMatrix::from_fn(9, 9, |a, b| j.frame_j[(a, b)] * inv))),
                    (ParamBlock::Bias, jac(DMatrix::from_fn(9, 6, |a, b| j.bias[(a, b)] * inv))),
                ]
            } else {
                Vec::new()
            };
            set.blocks.push(ResidualBlock {
                term: Term::Imu,
                index: i,
                weight: weights.w_io,
                whitened: DVector::from_column_slice((r * inv).as_slice()),
                jacobians,
            });
        }
    }

    if weights.w_t > 0.0 {
        let inv = 1.0 / weights.sigma_t;
        for (idx, (f, xy)) in problem.rtk.iter().enumerate() {
            let c = problem.frames[*f].pose.center();
            let r = DVector::from_vec(vec![(c.x - xy.x) * inv, (c.y - xy.y) * inv]);
            let mut jacobians = Vec::new();
            if with_jacobians {
                let mut jf = DMatrix::zeros(2, 9);
                jf[(0, 3)] = inv;
                jf[(1, 4)] = inv;
                jacobians.push((ParamBlock::Frame(*f), jf));
            }
            set.blocks.push(ResidualBlock { term: Term::Rtk, index: idx, weight: weights.w_t, whitened: r, jacobians });
        }
    }

    if weights.w_g > 0.0 {
        let inv = 1.0 / weights.sigma_g;
        for (idx, (f, meas)) in problem.gravity.iter().enumerate() {
            let g = problem.frames[*f].pose.gravity_dir().into_inner();
            let b = tangent_basis(meas);
            let r = b.transpose() * g * inv;
            let mut jacobians = Vec::new();
            if with_jacobians {
                let jw = -(b.transpose() * skew(&g)) * inv;
                let mut jf = DMatrix::zeros(2, 9);
                jf.view_mut((0, 0), (2, 3)).copy_from(&jw);
                jacobians.push((ParamBlock::Frame(*f), jf));
            }
            set.blocks.push(ResidualBlock {
                term: Term::Gravity,
                index: idx,
                weight: weights.w_g,
                whitened: DVector::from_column_slice(r.as_slice()),
                jacobians,
            });
        }
    }
    set
}

/// Applies a tangent-space update to a copy of the problem's states.
pub fn apply_update(problem: &TrajectoryProblem, block: ParamBlock, delta: &[f64]) -> TrajectoryProblem {
    let mut p = problem.clone();
    apply_update_in_place(&mut p, block, delta);
    p
}

pub(crate) fn apply_update_in_place(p: &mut TrajectoryProblem, block: ParamBlock, d: &[f64]) {
    match block {
        ParamBlock::Frame(i) => {
            let f = &mut p.frames[i];
            f.pose = f.pose.retract(&Vector3::new(d[0], d[1], d[2]), &Vector3::new(d[3], d[4], d[5]));
            f.velocity += Vector3::new(d[6], d[7], d[8]);
        }
        ParamBlock::Bias => {
            p.bias_gyro += Vector3::new(d[0], d[1], d[2]);
            p.bias_accel += Vector3::new(d[3], d[4], d[5]);
        }
        ParamBlock::Landmark(j) => p.landmarks[j].position += Vector3::new(d[0], d[1], d[2]),
    }
}
