use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::{Point2, Unit, Vector2, Vector3};
use thiserror::Error;

use super::preint::{preintegrate, ImuNoise, ImuPreintegration, ImuSample};
use crate::geom::{CameraIntrinsics, Pose, Rotation, UnitVec3};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("inconsistent problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub id: u32,
    /// seconds
    pub timestamp: f64,
    pub pose: Pose,
    /// World frame, m/s.
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub id: u32,
    pub position: Vector3<f64>,
}

/// A pixel observation; `frame` and `point` index into the problem vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub point: usize,
    pub pixel: Point2<f64>,
}

/// Raw samples between frame `i` and `i + 1` and their preintegration.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSegment {
    pub samples: Vec<ImuSample>,
    pub preint: ImuPreintegration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryProblem {
    pub camera: CameraIntrinsics,
    pub frames: Vec<Frame>,
    /// VO landmarks, optimized.
    pub landmarks: Vec<Point3>,
    /// Map points for self-localization, held fixed.
    pub map_points: Vec<Point3>,
    pub obs_sl: Vec<Observation>,
    pub obs_vo: Vec<Observation>,
    /// Empty, or one segment per consecutive frame pair.
    pub imu: Vec<ImuSegment>,
    pub imu_noise: ImuNoise,
    pub bias_gyro: Vector3<f64>,
    pub bias_accel: Vector3<f64>,
    /// `(frame index, measured xy)`
    pub rtk: Vec<(usize, Vector2<f64>)>,
    /// `(frame index, measured gravity direction in the camera frame)`
    pub gravity: Vec<(usize, UnitVec3)>,
}

impl TrajectoryProblem {
    pub fn validate(&self) -> Result<(), ProblemError> {
        let bad = |m: String| Err(ProblemError::Invalid(m));
        let nf = self.frames.len();
        if nf == 0 {
            return bad("no frames".into());
        }
        if !self.imu.is_empty() && self.imu.len() != nf - 1 {
            return bad(format!("{} IMU segments for {nf} frames", self.imu.len()));
        }
        for s in &self.imu {
            if s.samples.iter().any(|x| !(x.dt > 0.0)) {
                return bad("IMU sample with non-positive dt".into());
            }
        }
        for o in &self.obs_sl {
            if o.frame >= nf || o.point >= self.map_points.len() {
                return bad(format!("SL observation ({}, {}) out of range", o.frame, o.point));
            }
        }
        for o in &self.obs_vo {
            if o.frame >= nf || o.point >= self.landmarks.len() {
                return bad(format!("VO observation ({}, {}) out of range", o.frame, o.point));
            }
        }
        if self.rtk.iter().any(|(f, _)| *f >= nf) || self.gravity.iter().any(|(f, _)| *f >= nf) {
            return bad("sensor measurement for unknown frame".into());
        }
        Ok(())
    }

    /// Re-runs preintegration of every segment at the current bias estimate.
    pub fn repreintegrate(&mut self) {
        for s in &mut self.imu {
            s.preint = preintegrate(&s.samples, &self.bias_gyro, &self.bias_accel, &self.imu_noise);
        }
    }

    /// Builds segments from raw samples, preintegrated at the current biases.
    pub fn set_imu(&mut self, segments: Vec<Vec<ImuSample>>) {
        self.imu = segments
            .into_iter()
            .map(|samples| {
                let preint = preintegrate(&samples, &self.bias_gyro, &self.bias_accel, &self.imu_noise);
                ImuSegment { samples, preint }
            })
            .collect();
    }

    /// Parses the sectioned text format (see [`TrajectoryProblem::write`]).
    pub fn read<R: BufRead>(r: R) -> Result<Self, ProblemError> {
        let mut section = String::new();
        let mut camera = None;
        let mut frames = Vec::new();
        let mut landmarks = Vec::new();
        let mut map_points = Vec::new();
        let mut raw_sl = Vec::new();
        let mut raw_vo = Vec::new();
        let mut raw_imu: Vec<(usize, ImuSample)> = Vec::new();
        let mut raw_rtk = Vec::new();
        let mut raw_grav = Vec::new();
        let mut noise = ImuNoise::default();
        let mut biases = (Vector3::zeros(), Vector3::zeros());

        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let line_no = ln + 1;
            let t = line.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            if t.starts_with('[') && t.ends_with(']') {
                section = t[1..t.len() - 1].to_string();
                continue;
            }
            let perr = |msg: String| ProblemError::Parse { line: line_no, msg };
            let nums: Vec<f64> = t
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|e| perr(format!("{x:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            let want = |n: usize| -> Result<(), ProblemError> {
                if nums.len() != n {
                    return Err(ProblemError::Parse { line: line_no, msg: format!("expected {n} fields in [{section}], got {}", nums.len()) });
                }
                Ok(())
            };
            let id = |x: f64| -> Result<u32, ProblemError> {
                if x < 0.0 || x.fract() != 0.0 || x > u32::MAX as f64 {
                    return Err(ProblemError::Parse { line: line_no, msg: format!("bad id {x}") });
                }
                Ok(x as u32)
            };
            let v3 = |i: usize| Vector3::new(nums[i], nums[i + 1], nums[i + 2]);
            match section.as_str() {
                "CAMERA" => {
                    want(6)?;
                    let k = CameraIntrinsics::new(nums[0], nums[1], nums[2], nums[3], nums[4] as u32, nums[5] as u32)
                        .map_err(|e| perr(e.to_string()))?;
                    camera = Some(k);
                }
                "FRAMES" => {
                    want(12)?;
                    let q = Rotation::from_wxyz(nums[8], nums[5], nums[6], nums[7]);
                    frames.push(Frame {
                        id: id(nums[0])?,
                        timestamp: nums[1],
                        pose: Pose::from_orientation(q, v3(2)),
                        velocity: v3(9),
                    });
                }
                "LANDMARKS" | "MAPPOINTS" => {
                    want(4)?;
                    let p = Point3 { id: id(nums[0])?, position: v3(1) };
                    if section == "LANDMARKS" { landmarks.push(p) } else { map_points.push(p) }
                }
                "OBS_SL" | "OBS_VO" => {
                    want(4)?;
                    let o = (id(nums[0])?, id(nums[1])?, Point2::new(nums[2], nums[3]), line_no);
                    if section == "OBS_SL" { raw_sl.push(o) } else { raw_vo.push(o) }
                }
                "IMU" => {
                    want(8)?;
                    raw_imu.push((id(nums[0])? as usize, ImuSample { gyro: v3(1), accel: v3(4), dt: nums[7] }));
                }
                "IMU_NOISE" => {
                    want(2)?;
                    noise = ImuNoise { gyro_density: nums[0], accel_density: nums[1] };
                }
                "BIASES" => {
                    want(6)?;
                    biases = (v3(0), v3(3));
                }
                "RTK" => {
                    want(3)?;
                    raw_rtk.push((id(nums[0])?, Vector2::new(nums[1], nums[2]), line_no));
                }
                "GRAVITY" => {
                    want(4)?;
                    let g = Unit::try_new(v3(1), 1e-12).ok_or_else(|| perr("zero gravity vector".into()))?;
                    raw_grav.push((id(nums[0])?, g, line_no));
                }
                other => return Err(perr(format!("unknown section [{other}]"))),
            }
        }

        let camera = camera.ok_or_else(|| ProblemError::Invalid("missing [CAMERA] section".into()))?;
        let index = |items: &[u32]| -> HashMap<u32, usize> { items.iter().enumerate().map(|(i, id)| (*id, i)).collect() };
        let fidx = index(&frames.iter().map(|f| f.id).collect::<Vec<_>>());
        let lidx = index(&landmarks.iter().map(|p| p.id).collect::<Vec<_>>());
        let midx = index(&map_points.iter().map(|p| p.id).collect::<Vec<_>>());
        let lookup = |m: &HashMap<u32, usize>, id: u32, what: &str, line: usize| {
            m.get(&id).copied().ok_or_else(|| ProblemError::Parse { line, msg: format!("unknown {what} id {id}") })
        };
        let obs = |raw: Vec<(u32, u32, Point2<f64>, usize)>, pts: &HashMap<u32, usize>, what: &str| {
            raw.into_iter()
                .map(|(f, p, px, line)| {
                    Ok(Observation { frame: lookup(&fidx, f, "frame", line)?, point: lookup(pts, p, what, line)?, pixel: px })
                })
                .collect::<Result<Vec<_>, ProblemError>>()
        };
        let obs_sl = obs(raw_sl, &midx, "map point")?;
        let obs_vo = obs(raw_vo, &lidx, "landmark")?;
        let rtk = raw_rtk
            .into_iter()
            .map(|(f, xy, line)| Ok((lookup(&fidx, f, "frame", line)?, xy)))
            .collect::<Result<Vec<_>, ProblemError>>()?;
        let gravity = raw_grav
            .into_iter()
            .map(|(f, g, line)| Ok((lookup(&fidx, f, "frame", line)?, g)))
            .collect::<Result<Vec<_>, ProblemError>>()?;

        let mut segments: Vec<Vec<ImuSample>> = Vec::new();
        if !raw_imu.is_empty() {
            segments = vec![Vec::new(); frames.len().saturating_sub(1)];
            for (seg, s) in raw_imu {
                segments
                    .get_mut(seg)
                    .ok_or_else(|| ProblemError::Invalid(format!("IMU segment {seg} out of range")))?
                    .push(s);
            }
        }
        let mut p = TrajectoryProblem {
            camera,
            frames,
            landmarks,
            map_points,
            obs_sl,
            obs_vo,
            imu: Vec::new(),
            imu_noise: noise,
            bias_gyro: biases.0,
            bias_accel: biases.1,
            rtk,
            gravity,
        };
        if !segments.is_empty() {
            p.set_imu(segments);
        }
        p.validate()?;
        Ok(p)
    }

    /// Writes the sectioned text format. Frame quaternions are
    /// world-from-camera `qx qy qz qw`, positions are camera centers.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let k = &self.camera;
        writeln!(w, "# trajectory problem")?;
        writeln!(w, "[CAMERA]\n# fx fy cx cy width height")?;
        writeln!(w, "{} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height)?;
        writeln!(w, "[FRAMES]\n# id timestamp tx ty tz qx qy qz qw vx vy vz")?;
        for f in &self.frames {
            let q = f.pose.orientation().wxyz();
            let c = f.pose.center();
            let v = f.velocity;
            writeln!(
                w,
                "{} {} {} {} {} {} {} {} {} {} {} {}",
                f.id, f.timestamp, c.x, c.y, c.z, q[1], q[2], q[3], q[0], v.x, v.y, v.z
            )?;
        }
        writeln!(w, "[LANDMARKS]\n# id x y z")?;
        for p in &self.landmarks {
            writeln!(w, "{} {} {} {}", p.id, p.position.x, p.position.y, p.position.z)?;
        }
        writeln!(w, "[MAPPOINTS]\n# id x y z")?;
        for p in &self.map_points {
            writeln!(w, "{} {} {} {}", p.id, p.position.x, p.position.y, p.position.z)?;
        }
        writeln!(w, "[OBS_SL]\n# frame_id point_id u v")?;
        for o in &self.obs_sl {
            writeln!(w, "{} {} {} {}", self.frames[o.frame].id, self.map_points[o.point].id, o.pixel.x, o.pixel.y)?;
        }
        writeln!(w, "[OBS_VO]\n# frame_id landmark_id u v")?;
        for o in &self.obs_vo {
            writeln!(w, "{} {} {} {}", self.frames[o.frame].id, self.landmarks[o.point].id, o.pixel.x, o.pixel.y)?;
        }
        writeln!(w, "[IMU_NOISE]\n# gyro_density accel_density")?;
        writeln!(w, "{} {}", self.imu_noise.gyro_density, self.imu_noise.accel_density)?;
        writeln!(w, "[BIASES]\n# bgx bgy bgz bax bay baz")?;
        let (bg, ba) = (self.bias_gyro, self.bias_accel);
        writeln!(w, "{} {} {} {} {} {}", bg.x, bg.y, bg.z, ba.x, ba.y, ba.z)?;
        writeln!(w, "[IMU]\n# segment gx gy gz ax ay az dt")?;
        for (i, seg) in self.imu.iter().enumerate() {
            for s in &seg.samples {
                writeln!(
                    w,
                    "{i} {} {} {} {} {} {} {}",
                    s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z, s.dt
                )?;
            }
        }
        writeln!(w, "[RTK]\n# frame_id x y")?;
        for (f, xy) in &self.rtk {
            writeln!(w, "{} {} {}", self.frames[*f].id, xy.x, xy.y)?;
        }
        writeln!(w, "[GRAVITY]\n# frame_id gx gy gz (camera frame)")?;
        for (f, g) in &self.gravity {
            writeln!(w, "{} {} {} {}", self.frames[*f].id, g.x, g.y, g.z)?;
        }
        Ok(())
    }

    /// TUM trajectory: `timestamp tx ty tz qx qy qz qw`, world-from-camera.
    pub fn write_tum<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_tum(&mut w, self.frames.iter().map(|f| (f.timestamp, f.pose)))
    }
}

pub fn write_tum<W: Write>(w: &mut W, poses: impl IntoIterator<Item = (f64, Pose)>) -> std::io::Result<()> {
    for (t, p) in poses {
        let c = p.center();
        let q = p.orientation().wxyz();
        writeln!(w, "{t:.6} {:.9} {:.9} {:.9} {:.12} {:.12} {:.12} {:.12}", c.x, c.y, c.z, q[1], q[2], q[3], q[0])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_problem() -> TrajectoryProblem {
        let camera = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let frames = (0..3)
            .map(|i| Frame {
                id: 10 + i,
                timestamp: i as f64 * 0.1,
                pose: Pose::from_orientation(Rotation::from_axis_angle(&Vector3::new(0.1, 1.0, 0.2), 0.3 * i as f64), Vector3::new(i as f64, 0.5, 1.6)),
                velocity: Vector3::new(1.0, 0.0, 0.0),
            })
            .collect();
        let mut p = TrajectoryProblem {
            camera,
            frames,
            landmarks: vec![Point3 { id: 7, position: Vector3::new(1.0, 2.0, 3.0) }],
            map_points: vec![Point3 { id: 3, position: Vector3::new(-1.0, 4.0, 2.0) }],
            obs_sl: vec![Observation { frame: 1, point: 0, pixel: Point2::new(100.5, 200.25) }],
            obs_vo: vec![Observation { frame: 2, point: 0, pixel: Point2::new(10.0, 20.0) }],
            imu: Vec::new(),
            imu_noise: ImuNoise::default(),
            bias_gyro: Vector3::new(0.001, 0.0, 0.0),
            bias_accel: Vector3::zeros(),
            rtk: vec![(0, Vector2::new(0.01, 0.49))],
            gravity: vec![(2, Unit::new_normalize(Vector3::new(0.0, 1.0, 0.05)))],
        };
        let seg = vec![ImuSample { gyro: Vector3::new(0.0, 0.1, 0.0), accel: Vector3::new(0.0, -9.8, 0.1), dt: 0.05 }; 2];
        p.set_imu(vec![seg.clone(), seg]);
        p
    }

    #[test]
    fn text_round_trip() {
        let p = small_problem();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        let q = TrajectoryProblem::read(buf.as_slice()).unwrap();
        assert_eq!(q.frames.len(), 3);
        assert_eq!(q.obs_sl, p.obs_sl);
        assert_eq!(q.obs_vo, p.obs_vo);
        assert_eq!(q.rtk, p.rtk);
        assert_eq!(q.imu.len(), 2);
        assert_eq!(q.imu[1].samples, p.imu[1].samples);
        assert_eq!(q.bias_gyro, p.bias_gyro);
        for (a, b) in q.frames.iter().zip(&p.frames) {
            assert!((a.pose.center() - b.pose.center()).norm() < 1e-12);
            assert!((a.pose.rotation() * b.pose.rotation().inverse()).angle_deg() < 1e-9);
        }
        assert!((q.gravity[0].1.into_inner() - p.gravity[0].1.into_inner()).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_references() {
        let text = "[CAMERA]\n500 500 320 240 640 480\n[FRAMES]\n0 0 0 0 0 0 0 0 1 0 0 0\n[OBS_SL]\n0 5 1 1\n";
        match TrajectoryProblem::read(text.as_bytes()) {
            Err(ProblemError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        let text = "[CAMERA]\n500 500 320 240 640 480\n[FRAMES]\n0 0 0 0 0 0 0 0 1\n";
        assert!(matches!(TrajectoryProblem::read(text.as_bytes()), Err(ProblemError::Parse { line: 4, .. })));
        assert!(TrajectoryProblem::read("[FRAMES]\n".as_bytes()).is_err());
    }

    #[test]
    fn tum_lines() {
        let p = small_problem();
        let mut buf = Vec::new();
        p.write_tum(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        let first: Vec<f64> = s.lines().next().unwrap().split(' ').map(|x| x.parse().unwrap()).collect();
        assert_eq!(first.len(), 8);
        assert_eq!(&first[..4], &[0.0, 0.0, 0.5, 1.6]);
        assert_eq!(first[7], 1.0);
    }
}
