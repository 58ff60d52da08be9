//! Synthetic trajectory problems with known ground truth.

use nalgebra::{Point2, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::preint::{ImuNoise, ImuSample, GRAVITY};
use super::problem::{Frame, Observation, Point3, TrajectoryProblem};
use super::residuals::{tangent_basis, ResidualWeights};
use crate::geom::{project, CameraIntrinsics, Pose, Rotation, UnitVec3};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub frame_rate: f64,
    /// IMU samples per second; must be a multiple of `frame_rate`.
    pub imu_rate: f64,
    pub pixel_noise: f64,
    pub rtk_sigma: f64,
    pub gravity_sigma_deg: f64,
    pub imu_noise: ImuNoise,
    pub n_map_points: usize,
    pub n_landmarks: usize,
    /// Per-frame cap on observations of each kind.
    pub max_obs_per_frame: usize,
    /// Fractions of self-localization and VO observations replaced by
    /// uniformly random pixels.
    pub outlier_fraction: f64,
    pub vo_outlier_fraction: f64,
    pub init_rot_deg: f64,
    pub init_pos_m: f64,
    pub init_landmark_m: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 50,
            frame_rate: 10.0,
            imu_rate: 200.0,
            pixel_noise: 1.0,
            rtk_sigma: 0.02,
            gravity_sigma_deg: 0.1,
            imu_noise: ImuNoise::default(),
            n_map_points: 800,
            n_landmarks: 400,
            max_obs_per_frame: 40,
            outlier_fraction: 0.0,
            vo_outlier_fraction: 0.0,
            init_rot_deg: 0.5,
            init_pos_m: 0.1,
            init_landmark_m: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Exact measurements everywhere.
    pub fn noiseless(frames: usize) -> Self {
        Self {
            frames,
            pixel_noise: 0.0,
            rtk_sigma: 0.0,
            gravity_sigma_deg: 0.0,
            imu_noise: ImuNoise { gyro_density: 0.0, accel_density: 0.0 },
            ..Self::default()
        }
    }

    /// Weights whose sigmas match the simulated noise (floored so every
    /// term stays enabled in noiseless runs).
    pub fn weights(&self) -> ResidualWeights {
        ResidualWeights {
            sigma_sl: self.pixel_noise.max(0.1),
            sigma_vo: self.pixel_noise.max(0.1),
            sigma_t: self.rtk_sigma.max(1e-3),
            sigma_g: self.gravity_sigma_deg.to_radians().max(1e-4),
            ..ResidualWeights::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    /// Noisy measurements with perturbed initial states.
    pub problem: TrajectoryProblem,
    pub truth_frames: Vec<Frame>,
    pub truth_landmarks: Vec<Point3>,
    pub truth_bias_gyro: Vector3<f64>,
    pub truth_bias_accel: Vector3<f64>,
    pub outliers: usize,
}

impl Synthetic {
    /// The measurements of `problem` with every state set to the truth.
    pub fn truth_problem(&self) -> TrajectoryProblem {
        let mut p = self.problem.clone();
        p.frames = self.truth_frames.clone();
        p.landmarks = self.truth_landmarks.clone();
        p.bias_gyro = self.truth_bias_gyro;
        p.bias_accel = self.truth_bias_accel;
        p.repreintegrate();
        p
    }
}

fn angular_rate(t: f64) -> Vector3<f64> {
    // Camera frame: -y is up, so the y component is yaw.
    Vector3::new(0.05 * (1.3 * t).sin(), -0.25 * (0.6 * t).sin(), 0.04 * (1.7 * t).cos())
}

fn world_accel(t: f64) -> Vector3<f64> {
    Vector3::new(0.2 * (0.8 * t).cos(), 0.3 * (0.9 * t).sin(), 0.1 * (2.1 * t).sin())
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let n = normal(sigma);
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Random rotation with axis uniform on the sphere and angle `N(0, sigma)`.
fn random_rotation(rng: &mut ChaCha8Rng, sigma_rad: f64) -> Rotation {
    let axis = gauss3(rng, 1.0).normalize();
    Rotation::from_axis_angle(&axis, normal(sigma_rad).sample(rng))
}

/// A level walk heading along world +x with smooth turns and accelerations,
/// observed by a 640x480 camera.
pub fn synthesize(cfg: &SynthConfig) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let camera = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics");
    let sub = (cfg.imu_rate / cfg.frame_rate).round().max(1.0) as usize;
    let dt = 1.0 / (cfg.frame_rate * sub as f64);
    let bg = Vector3::new(0.002, -0.001, 0.0015);
    let ba = Vector3::new(0.02, -0.03, 0.01);

    // World from camera: camera z forward = +x, x right = -y, y down = -z.
    let mut w = Rotation::from_matrix(&nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0));
    let mut p = Vector3::new(0.0, 0.0, 1.6);
    let mut v = Vector3::new(1.2, 0.0, 0.0);
    let gyro_n = normal(cfg.imu_noise.gyro_density / dt.sqrt());
    let accel_n = normal(cfg.imu_noise.accel_density / dt.sqrt());
    let mut truth = Vec::with_capacity(cfg.frames);
    let mut segments = Vec::new();
    let mut t = 0.0;
    for k in 0..cfg.frames {
        truth.push(Frame { id: k as u32, timestamp: t, pose: Pose::from_orientation(w, p), velocity: v });
        if k + 1 == cfg.frames {
            break;
        }
        let mut seg = Vec::with_capacity(sub);
        for _ in 0..sub {
            let tm = t + 0.5 * dt;
            let omega = angular_rate(tm);
            let a = world_accel(tm);
            let wm = w * Rotation::exp(&(omega * (0.5 * dt)));
            let f = wm.inverse() * (a - GRAVITY);
            let noise_g = Vector3::new(gyro_n.sample(&mut rng), gyro_n.sample(&mut rng), gyro_n.sample(&mut rng));
            let noise_a = Vector3::new(accel_n.sample(&mut rng), accel_n.sample(&mut rng), accel_n.sample(&mut rng));
            seg.push(ImuSample { gyro: omega + bg + noise_g, accel: f + ba + noise_a, dt });
            p += v * dt + a * (0.5 * dt * dt);
            v += a * dt;
            w = (w * Rotation::exp(&(omega * dt))).renormalized();
            t += dt;
        }
        segments.push(seg);
    }

    let end = truth.last().map(|f| f.pose.center()).unwrap_or(p);
    let span = (end.x.max(0.0) + 20.0).max(20.0);
    let scatter = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Point3> {
        (0..n)
            .map(|i| Point3 {
                id: i as u32,
                position: Vector3::new(
                    rng.random_range(-4.0..span),
                    rng.random_range(-12.0..12.0),
                    rng.random_range(0.0..7.0),
                ),
            })
            .collect()
    };
    let map_points = scatter(cfg.n_map_points, &mut rng);
    let mut landmarks = scatter(cfg.n_landmarks, &mut rng);

    let pix_n = normal(cfg.pixel_noise);
    let mut outliers = 0;
    let observe = |points: &[Point3], fraction: f64, rng: &mut ChaCha8Rng, outliers: &mut usize| -> Vec<Observation> {
        let mut out = Vec::new();
        for (fi, f) in truth.iter().enumerate() {
            let mut vis: Vec<(usize, Point2<f64>)> = points
                .iter()
                .enumerate()
                .filter(|(_, pt)| f.pose.transform(&pt.position).z > 2.0)
                .filter_map(|(j, pt)| project(&f.pose, &camera, &pt.position).map(|px| (j, px)))
                .filter(|(_, px)| camera.contains(px))
                .collect();
            vis.shuffle(rng);
            vis.truncate(cfg.max_obs_per_frame);
            vis.sort_by_key(|(j, _)| *j);
            for (j, px) in vis {
                let pixel = if fraction > 0.0 && rng.random_bool(fraction) {
                    *outliers += 1;
                    Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
                } else {
                    Point2::new(px.x + pix_n.sample(rng), px.y + pix_n.sample(rng))
                };
                out.push(Observation { frame: fi, point: j, pixel });
            }
        }
        out
    };
    let obs_sl = observe(&map_points, cfg.outlier_fraction, &mut rng, &mut outliers);
    let mut obs_vo = observe(&landmarks, cfg.vo_outlier_fraction, &mut rng, &mut outliers);

    // Keep landmarks seen at least twice, reindexed densely.
    let mut count = vec![0usize; landmarks.len()];
    for o in &obs_vo {
        count[o.point] += 1;
    }
    let mut remap = vec![usize::MAX; landmarks.len()];
    let mut kept = Vec::new();
    for (j, l) in landmarks.iter().enumerate() {
        if count[j] >= 2 {
            remap[j] = kept.len();
            kept.push(*l);
        }
    }
    landmarks = kept;
    obs_vo.retain(|o| remap[o.point] != usize::MAX);
    for o in &mut obs_vo {
        o.point = remap[o.point];
    }

    let rtk_n = normal(cfg.rtk_sigma);
    let rtk = truth
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let c = f.pose.center();
            (i, Vector2::new(c.x + rtk_n.sample(&mut rng), c.y + rtk_n.sample(&mut rng)))
        })
        .collect();
    let tilt_n = normal(cfg.gravity_sigma_deg.to_radians() / std::f64::consts::SQRT_2);
    let gravity = truth
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let g = f.pose.gravity_dir();
            let b = tangent_basis(&g);
            let tilt = b * nalgebra::Vector2::new(tilt_n.sample(&mut rng), tilt_n.sample(&mut rng));
            (i, UnitVec3::new_normalize(Rotation::exp(&tilt) * g.into_inner()))
        })
        .collect();

    let init_frames = truth
        .iter()
        .map(|f| {
            let dr = random_rotation(&mut rng, cfg.init_rot_deg.to_radians());
            let w0 = f.pose.orientation() * dr;
            let c0 = f.pose.center() + gauss3(&mut rng, cfg.init_pos_m);
            Frame { pose: Pose::from_orientation(w0, c0), velocity: Vector3::zeros(), ..*f }
        })
        .collect();
    let init_landmarks = landmarks
        .iter()
        .map(|l| Point3 { position: l.position + gauss3(&mut rng, cfg.init_landmark_m), ..*l })
        .collect();

    let mut problem = TrajectoryProblem {
        camera,
        frames: init_frames,
        landmarks: init_landmarks,
        map_points,
        obs_sl,
        obs_vo,
        imu: Vec::new(),
        imu_noise: cfg.imu_noise,
        bias_gyro: Vector3::zeros(),
        bias_accel: Vector3::zeros(),
        rtk,
        gravity,
    };
    problem.set_imu(segments);
    Synthetic {
        problem,
        truth_frames: truth,
        truth_landmarks: landmarks,
        truth_bias_gyro: bg,
        truth_bias_accel: ba,
        outliers,
    }
}

/// Root-mean-square camera-center error, without alignment.
pub fn ate_rmse(estimate: &[Frame], truth: &[Frame]) -> f64 {
    assert_eq!(estimate.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let s: f64 = estimate.iter().zip(truth).map(|(e, t)| (e.pose.center() - t.pose.center()).norm_squared()).sum();
    (s / truth.len() as f64).sqrt()
}

/// Per-frame geodesic rotation errors in degrees.
pub fn rotation_errors_deg(estimate: &[Frame], truth: &[Frame]) -> Vec<f64> {
    estimate.iter().zip(truth).map(|(e, t)| crate::geom::pose_error(&e.pose, &t.pose).1).collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
