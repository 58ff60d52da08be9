use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::geom::{skew, so3_right_jacobian, Rotation};

/// Standard gravity in the world frame (ENU, m/s^2).
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

pub type Matrix9 = SMatrix<f64, 9, 9>;

/// One IMU reading, held constant over `dt`. Body frame is the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// rad/s
    pub gyro: Vector3<f64>,
    /// Specific force, m/s^2.
    pub accel: Vector3<f64>,
    /// seconds
    pub dt: f64,
}

/// White-noise densities of the IMU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    /// rad/s/sqrt(Hz)
    pub gyro_density: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_density: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self { gyro_density: 2e-4, accel_density: 2e-3 }
    }
}

/// Relative motion integrated in the frame of the segment's first sample,
/// with first-order bias Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuPreintegration {
    pub delta_r: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dt: f64,
    /// Covariance of `(dtheta, dv, dp)`.
    pub covariance: Matrix9,
    /// Biases the deltas were integrated with.
    pub bias_gyro: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    pub j_r_bg: Matrix3<f64>,
    pub j_v_bg: Matrix3<f64>,
    pub j_v_ba: Matrix3<f64>,
    pub j_p_bg: Matrix3<f64>,
    pub j_p_ba: Matrix3<f64>,
}

impl ImuPreintegration {
    fn identity(bias_gyro: Vector3<f64>, bias_accel: Vector3<f64>) -> Self {
        Self {
            delta_r: Rotation::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            dt: 0.0,
            covariance: Matrix9::zeros(),
            bias_gyro,
            bias_accel,
            j_r_bg: Matrix3::zeros(),
            j_v_bg: Matrix3::zeros(),
            j_v_ba: Matrix3::zeros(),
            j_p_bg: Matrix3::zeros(),
            j_p_ba: Matrix3::zeros(),
        }
    }

    /// Adds one sample: rotation at the interval midpoint drives the
    /// velocity and position updates.
    pub fn integrate(&mut self, s: &ImuSample, noise: &ImuNoise) {
        let dt = s.dt;
        let w = s.gyro - self.bias_gyro;
        let a = s.accel - self.bias_accel;
        let phi = w * dt;
        let half = Rotation::exp(&(phi * 0.5));
        let step = Rotation::exp(&phi);
        let rk = self.delta_r.matrix();
        let rm = (self.delta_r * half).matrix();
        let ax = skew(&a);
        let jr = so3_right_jacobian(&phi);
        let jr_half = so3_right_jacobian(&(phi * 0.5));
        let half_t = half.matrix().transpose();
        let step_t = step.matrix().transpose();

        // Bias Jacobians, position first since it uses the old velocity terms.
        let j_rm = half_t * self.j_r_bg - jr_half * (0.5 * dt);
        self.j_p_bg += self.j_v_bg * dt - rm * ax * j_rm * (0.5 * dt * dt);
        self.j_p_ba += self.j_v_ba * dt - rm * (0.5 * dt * dt);
        self.j_v_bg -= rm * ax * j_rm * dt;
        self.j_v_ba -= rm * dt;
        self.j_r_bg = step_t * self.j_r_bg - jr * dt;

        // Error-state propagation of (dtheta, dv, dp).
        let mut a_mat = Matrix9::identity();
        a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
        let dv_dth = -(rm * ax * half_t) * dt;
        a_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&dv_dth);
        a_mat.fixed_view_mut::<3, 3>(6, 0).copy_from(&(dv_dth * (0.5 * dt)));
        a_mat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
        let mut b = SMatrix::<f64, 9, 6>::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        let bvg = -(rm * ax * jr_half) * (0.5 * dt * dt);
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&bvg);
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(rm * dt));
        b.fixed_view_mut::<3, 3>(6, 0).copy_from(&(bvg * (0.5 * dt)));
        b.fixed_view_mut::<3, 3>(6, 3).copy_from(&(rm * (0.5 * dt * dt)));
        let mut qn = SMatrix::<f64, 6, 6>::zeros();
        let (sg, sa) = (noise.gyro_density.powi(2) / dt, noise.accel_density.powi(2) / dt);
        for i in 0..3 {
            qn[(i, i)] = sg;
            qn[(i + 3, i + 3)] = sa;
        }
        self.covariance = a_mat * self.covariance * a_mat.transpose() + b * qn * b.transpose();

        self.delta_p += self.delta_v * dt + rm * a * (0.5 * dt * dt);
        self.delta_v += rm * a * dt;
        self.delta_r = Rotation::from_matrix(&(rk * step.matrix()));
        self.dt += dt;
    }
}

/// Integrates `samples` with the given bias estimates.
pub fn preintegrate(
    samples: &[ImuSample],
    bias_gyro: &Vector3<f64>,
    bias_accel: &Vector3<f64>,
    noise: &ImuNoise,
) -> ImuPreintegration {
    let mut p = ImuPreintegration::identity(*bias_gyro, *bias_accel);
    for s in samples {
        p.integrate(s, noise);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn noise() -> ImuNoise {
        ImuNoise::default()
    }

    #[test]
    fn static_case_is_identity() {
        let s: Vec<_> = (0..400).map(|_| ImuSample { gyro: Vector3::zeros(), accel: -GRAVITY, dt: 0.005 }).collect();
        let p = preintegrate(&s, &Vector3::zeros(), &Vector3::zeros(), &noise());
        assert_eq!(p.delta_r.angle_deg(), 0.0);
        // Raw deltas integrate specific force; gravity enters in the residual.
        assert_abs_diff_eq!(p.delta_v, -GRAVITY * 2.0, epsilon = 1e-9);
        let grav_free: Vec<_> = s.iter().map(|x| ImuSample { accel: x.accel + GRAVITY, ..*x }).collect();
        let q = preintegrate(&grav_free, &Vector3::zeros(), &Vector3::zeros(), &noise());
        assert_eq!(q.delta_v, Vector3::zeros());
        assert_eq!(q.delta_p, Vector3::zeros());
        assert_abs_diff_eq!(q.dt, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_rate_rotation() {
        let (w, t, n) = (0.7, 1.5, 300);
        let s: Vec<_> = (0..n).map(|_| ImuSample { gyro: Vector3::new(0.0, 0.0, w), accel: Vector3::zeros(), dt: t / n as f64 }).collect();
        let p = preintegrate(&s, &Vector3::zeros(), &Vector3::zeros(), &noise());
        let truth = Rotation::from_axis_angle(&Vector3::z(), w * t);
        assert!((p.delta_r * truth.inverse()).angle_deg() < 1e-9);
    }

    fn smooth_stream(n: usize, total: f64) -> Vec<ImuSample> {
        let dt = total / n as f64;
        (0..n)
            .map(|k| {
                let t = (k as f64 + 0.5) * dt;
                ImuSample {
                    gyro: Vector3::new(0.3 * (1.1 * t).sin(), -0.2 + 0.1 * t.cos(), 0.2 * (0.7 * t).sin()),
                    accel: Vector3::new(0.5 * t.cos(), 9.81 + 0.2 * (2.0 * t).sin(), 0.3 * (0.5 * t).sin()),
                    dt,
                }
            })
            .collect()
    }

    #[test]
    fn refinement_converges() {
        let coarse = preintegrate(&smooth_stream(200, 1.0), &Vector3::zeros(), &Vector3::zeros(), &noise());
        let fine = preintegrate(&smooth_stream(2000, 1.0), &Vector3::zeros(), &Vector3::zeros(), &noise());
        assert!((coarse.delta_r * fine.delta_r.inverse()).log().norm() < 1e-4);
        assert!((coarse.delta_v - fine.delta_v).norm() < 1e-4);
        assert!((coarse.delta_p - fine.delta_p).norm() < 1e-4);
    }

    #[test]
    fn bias_jacobians_match_finite_differences() {
        let s = smooth_stream(40, 0.2);
        let bg = Vector3::new(0.01, -0.02, 0.005);
        let ba = Vector3::new(0.1, 0.05, -0.08);
        let p0 = preintegrate(&s, &bg, &ba, &noise());
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let pp = preintegrate(&s, &(bg + e), &ba, &noise());
            let pm = preintegrate(&s, &(bg - e), &ba, &noise());
            let dr = (p0.delta_r.inverse() * pp.delta_r).log() - (p0.delta_r.inverse() * pm.delta_r).log();
            assert_abs_diff_eq!(dr / (2.0 * h), p0.j_r_bg.column(k).into_owned(), epsilon = 1e-7);
            assert_abs_diff_eq!((pp.delta_v - pm.delta_v) / (2.0 * h), p0.j_v_bg.column(k).into_owned(), epsilon = 1e-7);
            assert_abs_diff_eq!((pp.delta_p - pm.delta_p) / (2.0 * h), p0.j_p_bg.column(k).into_owned(), epsilon = 1e-7);
            let pp = preintegrate(&s, &bg, &(ba + e), &noise());
            let pm = preintegrate(&s, &bg, &(ba - e), &noise());
            assert_abs_diff_eq!((pp.delta_v - pm.delta_v) / (2.0 * h), p0.j_v_ba.column(k).into_owned(), epsilon = 1e-7);
            assert_abs_diff_eq!((pp.delta_p - pm.delta_p) / (2.0 * h), p0.j_p_ba.column(k).into_owned(), epsilon = 1e-7);
        }
    }

    #[test]
    fn covariance_grows_and_is_symmetric() {
        let s = smooth_stream(100, 0.5);
        let p = preintegrate(&s, &Vector3::zeros(), &Vector3::zeros(), &noise());
        let q = preintegrate(&s[..50], &Vector3::zeros(), &Vector3::zeros(), &noise());
        assert!((p.covariance - p.covariance.transpose()).amax() < 1e-18);
        for i in 0..9 {
            assert!(p.covariance[(i, i)] > q.covariance[(i, i)]);
        }
    }
}
