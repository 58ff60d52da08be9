//! Rigid-body pose algebra and the pinhole camera model.
//!
//! World frame is East-North-Up; gravity points along world `-z`. A [`Pose`]
//! stores the camera-from-world rotation together with the camera center in
//! world coordinates, so a world point `X` maps to camera coordinates as
//! `R * (X - C)`. Camera axes follow the usual vision convention: `+x` right,
//! `+y` down, `+z` along the viewing direction.

use std::ops::Mul;

use nalgebra::{Matrix3, Point2, Unit, UnitQuaternion, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unit 3-vector (gravity directions, principal axes).
pub type UnitVec3 = Unit<Vector3<f64>>;

/// Depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("degenerate point configuration")]
    Degenerate,
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of [`so3_right_jacobian`].
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    let coeff = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        match Unit::try_new(*axis, 1e-15) {
            Some(a) => Self(UnitQuaternion::from_axis_angle(&a, angle)),
            None => Self::identity(),
        }
    }

    /// Exponential map from a rotation vector (radians).
    pub fn exp(omega: &Vector3<f64>) -> Self {
        Self(UnitQuaternion::from_scaled_axis(*omega))
    }

    /// Logarithm map to a rotation vector with angle in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        self.0.scaled_axis()
    }

    /// Projects an approximately orthonormal matrix onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self(UnitQuaternion::from_matrix_eps(m, 1e-15, 100, UnitQuaternion::identity()))
    }

    /// Builds a rotation from a quaternion given as `(w, x, y, z)`.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self(UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z)))
    }

    /// Quaternion coefficients `(w, x, y, z)` with non-negative `w`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// Rotation angle in degrees, in `[0, 180]`.
    pub fn angle_deg(&self) -> f64 {
        // atan2 keeps full precision near the identity, where acos(w) does not.
        let q = self.0.quaternion();
        (2.0 * q.imag().norm().atan2(q.w.abs())).to_degrees()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// Re-normalizes the underlying quaternion after long update chains.
    pub fn renormalized(&self) -> Self {
        Self(UnitQuaternion::new_normalize(*self.0.quaternion()))
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Camera pose: camera-from-world rotation plus camera center in world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Rotation,
    center: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Rotation::identity(), center: Vector3::zeros() }
    }

    /// `rotation` maps world vectors into the camera frame.
    pub fn new(rotation: Rotation, center: Vector3<f64>) -> Self {
        Self { rotation, center }
    }

    /// Builds a pose from the camera orientation expressed in the world
    /// (world-from-camera rotation) and the camera center.
    pub fn from_orientation(world_from_camera: Rotation, center: Vector3<f64>) -> Self {
        Self { rotation: world_from_camera.inverse(), center }
    }

    /// Builds a pose from the `x_cam = R x_world + t` form.
    pub fn from_rt(rotation: Rotation, translation: Vector3<f64>) -> Self {
        let center = -(rotation.inverse() * translation);
        Self { rotation, center }
    }

    /// Camera-from-world rotation.
    pub fn rotation(&self) -> Rotation {
        self.rotation
    }

    /// World-from-camera rotation.
    pub fn orientation(&self) -> Rotation {
        self.rotation.inverse()
    }

    /// Camera center in world coordinates (meters).
    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    /// Translation `t` of the `x_cam = R x_world + t` form.
    pub fn translation(&self) -> Vector3<f64> {
        -(self.rotation * self.center)
    }

    /// Camera center restricted to the horizontal plane.
    pub fn planar_translation(&self) -> Vector2<f64> {
        Vector2::new(self.center.x, self.center.y)
    }

    /// Maps a world point into the camera frame.
    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (world - self.center)
    }

    /// Inverse rigid transform (world-from-camera expressed as a camera pose).
    pub fn inverse(&self) -> Pose {
        Pose::from_rt(self.rotation.inverse(), self.center)
    }

    /// `self ∘ other` as rigid transforms in the `R x + t` form.
    pub fn compose(&self, other: &Pose) -> Pose {
        let r = self.rotation * other.rotation;
        let t = self.rotation * other.translation() + self.translation();
        Pose::from_rt(r, t)
    }

    /// Applies a rotation about the world `+z` axis to the camera body,
    /// keeping the center fixed.
    pub fn yawed(&self, yaw_rad: f64) -> Pose {
        let rz = Rotation::from_axis_angle(&Vector3::z(), yaw_rad);
        Pose::new(self.rotation * rz.inverse(), self.center)
    }

    /// Rotates the camera about its own viewing axis.
    pub fn rolled(&self, roll_rad: f64) -> Pose {
        let r = Rotation::from_axis_angle(&Vector3::z(), roll_rad);
        Pose::new(r * self.rotation, self.center)
    }

    /// Left perturbation on the rotation and additive update on the center:
    /// `R <- Exp(omega) R`, `C <- C + dc`.
    pub fn retract(&self, omega: &Vector3<f64>, dc: &Vector3<f64>) -> Pose {
        Pose::new((Rotation::exp(omega) * self.rotation).renormalized(), self.center + dc)
    }

    /// World `-z` expressed in the camera frame.
    pub fn gravity_dir(&self) -> UnitVec3 {
        Unit::new_normalize(self.rotation * Vector3::new(0.0, 0.0, -1.0))
    }

    /// Camera `+z` (viewing direction) expressed in the world frame.
    pub fn principal_axis(&self) -> UnitVec3 {
        Unit::new_normalize(self.rotation.inverse() * Vector3::z())
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point; `None` when it lies behind the camera.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Option<Point2<f64>> {
        if pc.z <= MIN_DEPTH {
            return None;
        }
        Some(Point2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }

    /// Jacobian of the projection with respect to the camera-frame point.
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }

    /// Unit bearing vector through a pixel.
    pub fn bearing(&self, px: &Point2<f64>) -> UnitVec3 {
        Unit::new_normalize(Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0))
    }

    pub fn contains(&self, px: &Point2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Pinhole projection of a world point; `None` flags a point at
/// non-positive depth whose residual must be skipped.
pub fn project(pose: &Pose, intrinsics: &CameraIntrinsics, point: &Vector3<f64>) -> Option<Point2<f64>> {
    intrinsics.project_camera(&pose.transform(point))
}

/// Angle between two unit vectors in degrees, robust to rounding past ±1.
pub fn angular_diff(a: &UnitVec3, b: &UnitVec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Position error (meters, between camera centers) and geodesic rotation
/// error (degrees) of an estimate against a reference pose.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let dt = (estimate.center() - truth.center()).norm();
    let rel = estimate.rotation() * truth.rotation().inverse();
    (dt, rel.angle_deg())
}

/// Closed-form least-squares rigid transform `dst ~= R src + t` (Kabsch).
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(Rotation, Vector3<f64>), GeomError> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(GeomError::Degenerate);
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(GeomError::Degenerate),
    };
    // Rank < 2 means the points are collinear (or coincident).
    let sv = svd.singular_values;
    let sv_max = sv.max();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if sv_max <= 0.0 || sorted[1] <= 1e-12 * sv_max.max(1e-300) {
        return Err(GeomError::Degenerate);
    }
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let rot = Rotation::from_matrix(&r);
    let t = cd - rot * cs;
    Ok((rot, t))
}
