//! Phone sensor readings and the prior pose assembled from them.
//!
//! The compass heading is the tilt-compensated azimuth of the camera's
//! viewing direction, measured clockwise from North (world `+y`) towards
//! East (world `+x`). When the camera looks straight up or down the viewing
//! direction has no azimuth; the image `+y` axis (flipped when looking down)
//! takes its place.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose, Rotation, UnitVec3};

const VERTICAL_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("gravity vector has zero length")]
    ZeroGravity,
    #[error("non-finite sensor value")]
    NonFinite,
    #[error("noise sigmas must be non-negative")]
    NegativeSigma,
    #[error("sensor log line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One query's sensor prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPrior {
    gps_xy: Vector2<f64>,
    gps_alt: Option<f64>,
    gravity_cam: UnitVec3,
    compass_heading: f64,
}

impl SensorPrior {
    /// Validates and normalizes the reading: gravity is rescaled to unit
    /// length and the heading wrapped into `[0, 360)`.
    pub fn new(
        gps_xy: Vector2<f64>,
        gps_alt: Option<f64>,
        gravity_cam: Vector3<f64>,
        compass_heading: f64,
    ) -> Result<Self, SensorError> {
        let finite = gps_xy.iter().all(|v| v.is_finite())
            && gps_alt.is_none_or(f64::is_finite)
            && gravity_cam.iter().all(|v| v.is_finite())
            && compass_heading.is_finite();
        if !finite {
            return Err(SensorError::NonFinite);
        }
        let gravity_cam = Unit::try_new(gravity_cam, 1e-12).ok_or(SensorError::ZeroGravity)?;
        Ok(Self { gps_xy, gps_alt, gravity_cam, compass_heading: wrap_degrees(compass_heading) })
    }

    pub fn gps_xy(&self) -> Vector2<f64> {
        self.gps_xy
    }

    pub fn gps_alt(&self) -> Option<f64> {
        self.gps_alt
    }

    pub fn gravity_cam(&self) -> UnitVec3 {
        self.gravity_cam
    }

    pub fn compass_heading(&self) -> f64 {
        self.compass_heading
    }

    /// Exact readings a perfect sensor suite would report for `pose`.
    pub fn from_pose(pose: &Pose, with_altitude: bool) -> Self {
        let c = pose.center();
        Self {
            gps_xy: Vector2::new(c.x, c.y),
            gps_alt: with_altitude.then_some(c.z),
            gravity_cam: pose.gravity_dir(),
            compass_heading: heading_of(pose),
        }
    }
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Horizontal reference direction of a camera, in camera coordinates.
fn forward_in_camera(up_cam: &Vector3<f64>) -> Vector3<f64> {
    let z = Vector3::z();
    let fwd = z - up_cam * up_cam.dot(&z);
    if fwd.norm() > VERTICAL_EPS {
        return fwd.normalize();
    }
    let sign = if up_cam.z >= 0.0 { 1.0 } else { -1.0 };
    let y = Vector3::y() * sign;
    (y - up_cam * up_cam.dot(&y)).normalize()
}

/// Compass heading (degrees) a tilt-compensated compass reports for `pose`.
pub fn heading_of(pose: &Pose) -> f64 {
    let up_cam = -pose.gravity_dir().into_inner();
    let fwd_world = pose.orientation() * forward_in_camera(&up_cam);
    wrap_degrees(fwd_world.x.atan2(fwd_world.y).to_degrees())
}

/// Full 6-DoF prior from GPS, gravity and compass. Roll and pitch align the
/// measured gravity with world `-z`; yaw then follows the heading. Without
/// GPS altitude the height falls back to `default_alt`.
pub fn prior_pose(prior: &SensorPrior, default_alt: f64) -> Pose {
    let up_cam = -prior.gravity_cam.into_inner();
    let fwd_cam = forward_in_camera(&up_cam);
    let right_cam = fwd_cam.cross(&up_cam);

    let h = prior.compass_heading.to_radians();
    let fwd_world = Vector3::new(h.sin(), h.cos(), 0.0);
    let up_world = Vector3::z();
    let right_world = fwd_world.cross(&up_world);

    let cam_basis = Matrix3::from_columns(&[fwd_cam, right_cam, up_cam]);
    let world_basis = Matrix3::from_columns(&[fwd_world, right_world, up_world]);
    let world_from_cam = Rotation::from_matrix(&(world_basis * cam_basis.transpose()));

    let z = prior.gps_alt.unwrap_or(default_alt);
    Pose::from_orientation(world_from_cam, Vector3::new(prior.gps_xy.x, prior.gps_xy.y, z))
}

/// Noise model used to simulate phone sensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoiseModel {
    pub gps_sigma_xy: f64,
    pub compass_sigma: f64,
    pub gravity_sigma: f64,
    pub seed: u64,
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        Self { gps_sigma_xy: 3.0, compass_sigma: 10.0, gravity_sigma: 0.5, seed: 0 }
    }
}

impl SensorNoiseModel {
    pub fn noiseless() -> Self {
        Self { gps_sigma_xy: 0.0, compass_sigma: 0.0, gravity_sigma: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if self.gps_sigma_xy < 0.0 || self.compass_sigma < 0.0 || self.gravity_sigma < 0.0 {
            return Err(SensorError::NegativeSigma);
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma validated").sample(rng)
}

/// Adds Gaussian GPS noise, wrapped-Gaussian heading noise and a random
/// small-angle tilt of the gravity vector, drawing from `rng`.
pub fn perturb_with_rng(reading: &SensorPrior, model: &SensorNoiseModel, rng: &mut impl Rng) -> SensorPrior {
    let gps_xy = reading.gps_xy + Vector2::new(normal(rng, model.gps_sigma_xy), normal(rng, model.gps_sigma_xy));
    let compass_heading = wrap_degrees(reading.compass_heading + normal(rng, model.compass_sigma));

    let g = reading.gravity_cam.into_inner();
    // Per-axis sigma chosen so the RMS tilt angle equals `gravity_sigma`.
    let per_axis = model.gravity_sigma.to_radians() / std::f64::consts::SQRT_2;
    let tx = normal(rng, per_axis);
    let ty = normal(rng, per_axis);
    let gravity_cam = if tx == 0.0 && ty == 0.0 {
        reading.gravity_cam
    } else {
        // Tilt about an axis in the plane orthogonal to gravity.
        let helper = if g.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = g.cross(&helper).normalize();
        let e2 = g.cross(&e1);
        Unit::new_normalize(Rotation::exp(&(e1 * tx + e2 * ty)) * g)
    };
    SensorPrior { gps_xy, gps_alt: reading.gps_alt, gravity_cam, compass_heading }
}

/// Deterministic variant of [`perturb_with_rng`] seeded from the model.
pub fn perturb(reading: &SensorPrior, model: &SensorNoiseModel) -> SensorPrior {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    perturb_with_rng(reading, model, &mut rng)
}

/// One line of the sensor log (JSON object per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub id: u32,
    pub timestamp_ns: u64,
    pub gps_xy: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gps_alt: Option<f64>,
    pub gravity_cam: [f64; 3],
    pub compass_deg: f64,
}

impl SensorRecord {
    pub fn from_prior(id: u32, timestamp_ns: u64, prior: &SensorPrior) -> Self {
        let g = prior.gravity_cam();
        Self {
            id,
            timestamp_ns,
            gps_xy: [prior.gps_xy.x, prior.gps_xy.y],
            gps_alt: prior.gps_alt,
            gravity_cam: [g.x, g.y, g.z],
            compass_deg: prior.compass_heading,
        }
    }

    pub fn prior(&self) -> Result<SensorPrior, SensorError> {
        SensorPrior::new(
            Vector2::new(self.gps_xy[0], self.gps_xy[1]),
            self.gps_alt,
            Vector3::new(self.gravity_cam[0], self.gravity_cam[1], self.gravity_cam[2]),
            self.compass_deg,
        )
    }
}

pub fn write_sensor_log<W: Write>(mut w: W, records: &[SensorRecord]) -> Result<(), SensorError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sensor_log<R: BufRead>(r: R) -> Result<Vec<SensorRecord>, SensorError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| SensorError::Parse { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}
