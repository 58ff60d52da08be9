//! Synthetic scenes: reference images on a grid, a point cloud with feature
//! tracks, dense feature maps and sensor-equipped queries.
//!
//! Every map point owns a random coarse and fine code. Reference maps store
//! the code on the four grid cells around the point's projection so a
//! bilinear sample returns it exactly. Query maps put the coarse code in the
//! nearest coarse cell and store fine log-weights whose softmax expectation
//! is the true pixel. A query point whose fine stencil collides with a
//! nearer one is occluded.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Point2, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use priorloc_core::geom::{CameraIntrinsics, Pose, Rotation};
use priorloc_core::matching::{FeatureMaps, MapPoint, SubMap, TrackObservation, COARSE_STRIDE, FINE_STRIDE};
use priorloc_core::retrieval::{DescriptorIndex, IndexEntry};
use priorloc_core::sensors::{heading_of, perturb_with_rng, SensorNoiseModel, SensorPrior, SensorRecord};

use crate::dataset::{self, CameraSpec, QueryDescriptor, SceneInfo, TruthRow};
use crate::CliError;

pub const IMAGE_WIDTH: u32 = 128;
pub const IMAGE_HEIGHT: u32 = 96;
pub const FOCAL: f64 = 100.0;
pub const CAMERA_HEIGHT: f64 = 1.6;
/// Points farther than this are not observed.
const MAX_RANGE: f64 = 30.0;
const MIN_DEPTH: f64 = 0.5;
const COARSE_AMPLITUDE: f64 = 4.0;
/// Log floor of the fine heatmap weights.
const FINE_EPS: f64 = 1e-12;
/// Softmax temperature the fine maps are built for.
const FINE_TEMPERATURE: f64 = 0.1;
const GLOBAL_DIM: usize = 64;
const GLOBAL_LENGTH: f64 = 15.0;
const GLOBAL_HEADING_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_points: usize,
    /// Reference images, laid out as grid nodes times `headings`.
    pub n_refs: usize,
    pub n_queries: usize,
    /// Side of the square area holding references and queries, meters.
    pub extent: f64,
    pub headings: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
    pub noise: SensorNoiseModel,
    /// Fraction of query features that are spurious.
    pub outlier_fraction: f64,
    /// Day/night stand-in: blend of query features toward noise and of the
    /// query's global descriptor toward an aliased place.
    pub descriptor_corruption: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_points: 1300,
            n_refs: 200,
            n_queries: 50,
            extent: 40.0,
            headings: 8,
            coarse_dim: 128,
            fine_dim: 16,
            noise: SensorNoiseModel::default(),
            outlier_fraction: 0.0,
            descriptor_corruption: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(format!("scene: {m}")));
        if self.n_points == 0 || self.n_refs == 0 {
            return bad("n_points and n_refs must be at least 1");
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        if self.headings == 0 || self.coarse_dim == 0 || self.fine_dim == 0 {
            return bad("headings and descriptor dimensions must be at least 1");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.descriptor_corruption) {
            return bad("descriptor_corruption must lie in [0, 1]");
        }
        self.noise.validate().map_err(|e| CliError::Config(format!("scene noise: {e}")))
    }
}

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(FOCAL, FOCAL, 64.0, 48.0, IMAGE_WIDTH, IMAGE_HEIGHT).expect("valid intrinsics")
}

/// Level camera at `center` looking along compass `heading_deg` (0 = north,
/// clockwise), then pitched and rolled.
pub fn camera_pose(center: Vector3<f64>, heading_deg: f64, pitch_deg: f64, roll_deg: f64) -> Pose {
    let h = heading_deg.to_radians();
    let fwd = Vector3::new(h.sin(), h.cos(), 0.0);
    let right = Vector3::new(h.cos(), -h.sin(), 0.0);
    let down = -Vector3::z();
    let world_from_cam = Rotation::from_matrix(&nalgebra::Matrix3::from_columns(&[right, down, fwd]));
    let tilt = Rotation::exp(&Vector3::new(pitch_deg.to_radians(), 0.0, roll_deg.to_radians()));
    Pose::from_orientation(world_from_cam * tilt, center)
}

/// Pixels whose coarse and fine bilinear stencils stay inside the grids.
fn in_stencil(px: &Point2<f64>) -> bool {
    let max_x = (IMAGE_WIDTH as usize - COARSE_STRIDE) as f64;
    let max_y = (IMAGE_HEIGHT as usize - COARSE_STRIDE) as f64;
    px.x >= 0.0 && px.y >= 0.0 && px.x < max_x && px.y < max_y
}

fn observe(pose: &Pose, k: &CameraIntrinsics, p: &Vector3<f64>) -> Option<(f64, Point2<f64>)> {
    let pc = pose.transform(p);
    if pc.z < MIN_DEPTH || pc.z > MAX_RANGE {
        return None;
    }
    let px = k.project_camera(&pc)?;
    in_stencil(&px).then_some((pc.z, px))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Random Fourier features of horizontal position and viewing azimuth.
struct GlobalEncoder {
    w: DMatrix<f64>,
    b: Vec<f64>,
}

impl GlobalEncoder {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let w = DMatrix::from_fn(GLOBAL_DIM, 4, |_, _| StandardNormal.sample(rng));
        let b = (0..GLOBAL_DIM).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        Self { w, b }
    }

    fn raw(&self, pose: &Pose) -> Vec<f64> {
        let c = pose.center();
        let a = pose.principal_axis();
        let az = Vector2::new(a.x, a.y).try_normalize(1e-9).unwrap_or(Vector2::x());
        let x = nalgebra::Vector4::new(
            c.x / GLOBAL_LENGTH,
            c.y / GLOBAL_LENGTH,
            GLOBAL_HEADING_WEIGHT * az.x,
            GLOBAL_HEADING_WEIGHT * az.y,
        );
        let proj = &self.w * x;
        (0..GLOBAL_DIM).map(|i| (proj[i] + self.b[i]).cos()).collect()
    }
}

fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / n) as f32).collect()
}

/// The four grid cells (with bilinear weights) around `px` at `stride`.
fn stencil(px: &Point2<f64>, stride: usize) -> [((usize, usize), f64); 4] {
    let (gx, gy) = (px.x / stride as f64, px.y / stride as f64);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    [
        ((x0, y0), (1.0 - fx) * (1.0 - fy)),
        ((x0 + 1, y0), fx * (1.0 - fy)),
        ((x0, y0 + 1), (1.0 - fx) * fy),
        ((x0 + 1, y0 + 1), fx * fy),
    ]
}

struct PointCodes {
    coarse: Vec<Vec<f64>>,
    fine: Vec<Vec<f64>>,
}

/// Reference maps with exact per-point codes; points whose stencils collide
/// with a nearer point's are left out of this image's tracks.
fn reference_maps(
    pose: &Pose,
    k: &CameraIntrinsics,
    points: &[Vector3<f64>],
    codes: &PointCodes,
    spec: &SceneSpec,
) -> (FeatureMaps, Vec<(usize, Point2<f64>)>) {
    let mut maps = FeatureMaps::zeros(IMAGE_HEIGHT as usize, IMAGE_WIDTH as usize, spec.coarse_dim, spec.fine_dim)
        .expect("image size is a stride multiple");
    let mut visible: Vec<(f64, usize, Point2<f64>)> =
        points.iter().enumerate().filter_map(|(j, p)| observe(pose, k, p).map(|(d, px)| (d, j, px))).collect();
    visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (cw, ch) = maps.coarse_shape();
    let (fw, fh) = maps.fine_shape();
    let mut coarse_used = vec![false; cw * ch];
    let mut fine_used = vec![false; fw * fh];
    let mut tracks = Vec::new();
    for (_, j, px) in visible {
        let cs = stencil(&px, COARSE_STRIDE);
        let fs = stencil(&px, FINE_STRIDE);
        let free = cs.iter().all(|((x, y), _)| !coarse_used[y * cw + x]) && fs.iter().all(|((x, y), _)| !fine_used[y * fw + x]);
        if !free {
            continue;
        }
        for ((x, y), _) in cs {
            coarse_used[y * cw + x] = true;
            maps.coarse_at_mut(x, y).iter_mut().zip(&codes.coarse[j]).for_each(|(d, s)| *d = *s as f32);
        }
        for ((x, y), _) in fs {
            fine_used[y * fw + x] = true;
            maps.fine_at_mut(x, y).iter_mut().zip(&codes.fine[j]).for_each(|(d, s)| *d = *s as f32);
        }
        tracks.push((j, px));
    }
    (maps, tracks)
}

/// Query maps: coarse codes in the nearest coarse cell and fine
/// log-weights, blended toward noise by `corruption`.
fn query_maps(
    features: &[(usize, Point2<f64>)],
    codes: &PointCodes,
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> FeatureMaps {
    let mut maps = FeatureMaps::zeros(IMAGE_HEIGHT as usize, IMAGE_WIDTH as usize, spec.coarse_dim, spec.fine_dim)
        .expect("image size is a stride multiple");
    let (cw, ch) = maps.coarse_shape();
    let (fw, fh) = maps.fine_shape();
    let mut coarse = vec![0.0f64; cw * ch * spec.coarse_dim];
    let mut fine = vec![0.0f64; fw * fh * spec.fine_dim];
    let log_floor = -FINE_EPS.ln();
    for (j, px) in features {
        let gx = ((px.x / COARSE_STRIDE as f64).round() as usize).min(cw - 1);
        let gy = ((px.y / COARSE_STRIDE as f64).round() as usize).min(ch - 1);
        let cell = &mut coarse[(gy * cw + gx) * spec.coarse_dim..][..spec.coarse_dim];
        cell.iter_mut().zip(&codes.coarse[*j]).for_each(|(d, s)| *d += COARSE_AMPLITUDE * s);
        for ((x, y), wgt) in stencil(px, FINE_STRIDE) {
            if x >= fw || y >= fh {
                continue;
            }
            let scale = FINE_TEMPERATURE * ((wgt + FINE_EPS).ln() + log_floor);
            let cell = &mut fine[(y * fw + x) * spec.fine_dim..][..spec.fine_dim];
            cell.iter_mut().zip(&codes.fine[*j]).for_each(|(d, s)| *d += scale * s);
        }
    }
    let c = spec.descriptor_corruption;
    for (i, cell) in coarse.chunks_mut(spec.coarse_dim).enumerate() {
        let noise = if c > 0.0 { unit_gaussian(rng, spec.coarse_dim) } else { Vec::new() };
        let out = &mut maps.coarse_raw_mut()[i * spec.coarse_dim..][..spec.coarse_dim];
        for (d, (v, ch)) in out.iter_mut().zip(cell.iter().zip(0..)) {
            let n = if c > 0.0 { noise[ch] } else { 0.0 };
            *d = ((1.0 - c) * v + c * COARSE_AMPLITUDE * n) as f32;
        }
    }
    let fine_noise = FINE_TEMPERATURE * log_floor;
    for (i, cell) in fine.chunks_mut(spec.fine_dim).enumerate() {
        let noise = if c > 0.0 { unit_gaussian(rng, spec.fine_dim) } else { Vec::new() };
        let out = &mut maps.fine_raw_mut()[i * spec.fine_dim..][..spec.fine_dim];
        for (d, (v, ch)) in out.iter_mut().zip(cell.iter().zip(0..)) {
            let n = if c > 0.0 { noise[ch] } else { 0.0 };
            *d = ((1.0 - c) * v + c * fine_noise * n) as f32;
        }
    }
    maps
}

/// Points seen by a query in depth order; a point whose fine stencil
/// touches a cell already taken by a nearer point is hidden.
fn visible_unoccluded(pose: &Pose, k: &CameraIntrinsics, points: &[Vector3<f64>], ids: &[usize]) -> Vec<(usize, Point2<f64>)> {
    let mut vis: Vec<(f64, usize, Point2<f64>)> =
        ids.iter().filter_map(|&j| observe(pose, k, &points[j]).map(|(d, px)| (d, j, px))).collect();
    vis.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let fw = IMAGE_WIDTH as usize / FINE_STRIDE;
    let mut used = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(vis.len());
    for (_, j, px) in vis {
        let cells: Vec<usize> = stencil(&px, FINE_STRIDE).iter().map(|((x, y), _)| y * fw + x).collect();
        if cells.iter().any(|c| used.contains(c)) {
            continue;
        }
        used.extend(cells);
        out.push((j, px));
    }
    out.sort_by_key(|f| f.0);
    out
}

/// Summary of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStats {
    pub refs: usize,
    pub queries: usize,
    pub points_with_tracks: usize,
    pub mean_track_len: f64,
    pub mean_query_features: f64,
}

/// Writes a complete dataset into `out`. Deterministic for a fixed spec.
pub fn generate_scene(spec: &SceneSpec, out: &Path) -> Result<SceneStats, CliError> {
    spec.validate()?;
    let k = camera();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let margin = 15.0;
    let points: Vec<Vector3<f64>> = (0..spec.n_points)
        .map(|_| {
            Vector3::new(
                rng.random_range(-margin..spec.extent + margin),
                rng.random_range(-margin..spec.extent + margin),
                rng.random_range(0.0..6.0),
            )
        })
        .collect();
    let codes = PointCodes {
        coarse: (0..spec.n_points).map(|_| unit_gaussian(&mut rng, spec.coarse_dim)).collect(),
        fine: (0..spec.n_points).map(|_| unit_gaussian(&mut rng, spec.fine_dim)).collect(),
    };
    let encoder = GlobalEncoder::new(&mut rng);

    // Reference layout: square grid of nodes, `headings` views per node.
    let nodes = spec.n_refs.div_ceil(spec.headings);
    let side = (nodes as f64).sqrt().ceil() as usize;
    let spacing = if side > 1 { spec.extent / (side - 1) as f64 } else { 0.0 };
    let mut ref_poses = Vec::with_capacity(spec.n_refs);
    'grid: for gy in 0..side {
        for gx in 0..side {
            for h in 0..spec.headings {
                if ref_poses.len() == spec.n_refs {
                    break 'grid;
                }
                let c = Vector3::new(gx as f64 * spacing, gy as f64 * spacing, CAMERA_HEIGHT);
                ref_poses.push(camera_pose(c, h as f64 * 360.0 / spec.headings as f64, 0.0, 0.0));
            }
        }
    }

    let feat_dir = out.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| CliError::io(&feat_dir, e))?;
    let mut tracks: BTreeMap<usize, Vec<TrackObservation>> = BTreeMap::new();
    let mut entries = Vec::with_capacity(ref_poses.len());
    for (i, pose) in ref_poses.iter().enumerate() {
        let id = i as u32;
        let (maps, obs) = reference_maps(pose, &k, &points, &codes, spec);
        dataset::write_feature_maps(&feat_dir.join(dataset::ref_map_name(id)), &maps)?;
        for (j, px) in &obs {
            tracks.entry(*j).or_default().push(TrackObservation { image_id: id, pixel: *px });
        }
        let mut observed: Vec<u32> = obs.iter().map(|(j, _)| *j as u32).collect();
        observed.sort_unstable();
        entries.push(IndexEntry {
            image_id: id,
            pose: *pose,
            descriptor: to_unit_f32(&encoder.raw(pose)),
            observed_point_ids: observed,
        });
    }
    let index = DescriptorIndex::new(GLOBAL_DIM, entries).map_err(|e| CliError::Config(e.to_string()))?;
    let submap = SubMap {
        points: tracks
            .iter()
            .map(|(j, t)| MapPoint { id: *j as u32, position: points[*j], track: t.clone() })
            .collect(),
    };
    let mapped: Vec<usize> = tracks.keys().copied().collect();

    let mut sensor_rng = ChaCha8Rng::seed_from_u64(spec.noise.seed ^ spec.seed.rotate_left(17));
    let mut records = Vec::with_capacity(spec.n_queries);
    let mut descriptors = Vec::with_capacity(spec.n_queries);
    let mut truth = Vec::with_capacity(spec.n_queries);
    let mut feature_count = 0usize;
    for q in 0..spec.n_queries {
        let id = q as u32;
        let c = Vector3::new(
            rng.random_range(0.0..spec.extent),
            rng.random_range(0.0..spec.extent),
            CAMERA_HEIGHT + rng.random_range(-0.1..0.1),
        );
        let pose = camera_pose(c, rng.random_range(0.0..360.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));

        let mut feats = visible_unoccluded(&pose, &k, &points, &mapped);
        let n_out = if spec.outlier_fraction > 0.0 {
            ((spec.outlier_fraction / (1.0 - spec.outlier_fraction)) * feats.len() as f64).round() as usize
        } else {
            0
        };
        for _ in 0..n_out {
            let j = mapped[rng.random_range(0..mapped.len())];
            let px = Point2::new(
                rng.random_range(0.0..(IMAGE_WIDTH as usize - COARSE_STRIDE) as f64),
                rng.random_range(0.0..(IMAGE_HEIGHT as usize - COARSE_STRIDE) as f64),
            );
            feats.push((j, px));
        }
        feature_count += feats.len();
        let maps = query_maps(&feats, &codes, spec, &mut rng);
        dataset::write_feature_maps(&feat_dir.join(dataset::query_map_name(id)), &maps)?;

        let clean = encoder.raw(&pose);
        let desc = if spec.descriptor_corruption > 0.0 {
            // Aliased place: the opposite view from somewhere nearby.
            let shift = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0);
            let alias = camera_pose(c + shift, heading_of(&pose) + 180.0, 0.0, 0.0);
            let a = encoder.raw(&alias);
            let cw = spec.descriptor_corruption;
            let mixed: Vec<f64> = clean.iter().zip(&a).map(|(x, y)| (1.0 - cw) * x + cw * y).collect();
            to_unit_f32(&mixed)
        } else {
            to_unit_f32(&clean)
        };
        descriptors.push(QueryDescriptor { id, descriptor: desc });

        let reading = SensorPrior::from_pose(&pose, false);
        let noisy = perturb_with_rng(&reading, &spec.noise, &mut sensor_rng);
        records.push(SensorRecord::from_prior(id, q as u64 * 100_000_000, &noisy));
        truth.push(TruthRow::from_pose(id, &pose));
    }

    let track_total: usize = submap.points.iter().map(|p| p.track.len()).sum();
    let stats = SceneStats {
        refs: ref_poses.len(),
        queries: spec.n_queries,
        points_with_tracks: submap.points.len(),
        mean_track_len: if submap.points.is_empty() { 0.0 } else { track_total as f64 / submap.points.len() as f64 },
        mean_query_features: if spec.n_queries == 0 { 0.0 } else { feature_count as f64 / spec.n_queries as f64 },
    };
    let info = SceneInfo { spec: spec.clone(), camera: CameraSpec::from(&k), default_alt: CAMERA_HEIGHT, stats: stats.clone() };
    dataset::write_dataset(out, &info, &index, &submap, &records, &descriptors, &truth)?;
    Ok(stats)
}

/// Per-point map of reference observation counts, for diagnostics.
pub fn track_histogram(submap: &SubMap) -> HashMap<usize, usize> {
    let mut h = HashMap::new();
    for p in &submap.points {
        *h.entry(p.track.len()).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use priorloc_core::geom::project;
    use priorloc_core::matching::{aggregate, match_query, IdentityTransform, MatchConfig};

    #[test]
    fn camera_pose_heading_convention() {
        let p = camera_pose(Vector3::zeros(), 90.0, 0.0, 0.0);
        assert!((p.principal_axis().into_inner() - Vector3::x()).norm() < 1e-12);
        assert!((heading_of(&p) - 90.0).abs() < 1e-9);
        assert!((p.gravity_dir().into_inner() - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn reference_maps_return_exact_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SceneSpec::default();
        let k = camera();
        let pose = camera_pose(Vector3::new(0.0, 0.0, 1.6), 0.0, 0.0, 0.0);
        let points: Vec<_> =
            (0..400).map(|_| Vector3::new(rng.random_range(-15.0..15.0), rng.random_range(2.0..25.0), rng.random_range(0.0..6.0))).collect();
        let codes = PointCodes {
            coarse: (0..400).map(|_| unit_gaussian(&mut rng, spec.coarse_dim)).collect(),
            fine: (0..400).map(|_| unit_gaussian(&mut rng, spec.fine_dim)).collect(),
        };
        let (maps, obs) = reference_maps(&pose, &k, &points, &codes, &spec);
        assert!(obs.len() > 10);
        for (j, px) in obs {
            let c = maps.sample_coarse(&px);
            let f = maps.sample_fine(&px);
            for (a, b) in c.iter().zip(&codes.coarse[j]) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in f.iter().zip(&codes.fine[j]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clean_query_maps_match_at_true_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = SceneSpec::default();
        let k = camera();
        let ref_pose = camera_pose(Vector3::new(0.0, 0.0, 1.6), 0.0, 0.0, 0.0);
        let query_pose = camera_pose(Vector3::new(0.5, 1.0, 1.6), 8.0, 2.0, -1.0);
        let points: Vec<_> =
            (0..300).map(|_| Vector3::new(rng.random_range(-15.0..15.0), rng.random_range(4.0..25.0), rng.random_range(0.0..6.0))).collect();
        let codes = PointCodes {
            coarse: (0..300).map(|_| unit_gaussian(&mut rng, spec.coarse_dim)).collect(),
            fine: (0..300).map(|_| unit_gaussian(&mut rng, spec.fine_dim)).collect(),
        };
        let (ref_maps, obs) = reference_maps(&ref_pose, &k, &points, &codes, &spec);
        let submap = SubMap {
            points: obs
                .iter()
                .map(|(j, px)| MapPoint { id: *j as u32, position: points[*j], track: vec![TrackObservation { image_id: 0, pixel: *px }] })
                .collect(),
        };
        let agg = aggregate(&submap, &HashMap::from([(0, ref_maps)]));
        let feats: Vec<_> = obs.iter().filter_map(|(j, _)| observe(&query_pose, &k, &points[*j]).map(|(_, px)| (*j, px))).collect();
        let qmaps = query_maps(&feats, &codes, &spec, &mut rng);
        let m = match_query(&qmaps, &agg, &MatchConfig::day(), &IdentityTransform).unwrap();
        assert!(m.matches.len() as f64 >= 0.7 * feats.len() as f64, "{} of {}", m.matches.len(), feats.len());
        let mut good = 0;
        for mm in &m.matches {
            let truth = project(&query_pose, &k, &mm.position).unwrap();
            if (truth - mm.refined_px).norm() < 0.05 {
                good += 1;
            }
        }
        assert!(good as f64 >= 0.9 * m.matches.len() as f64, "{good} of {}", m.matches.len());
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec::default().validate().is_ok());
        assert!(SceneSpec { extent: 0.0, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { outlier_fraction: 1.0, ..SceneSpec::default() }.validate().is_err());
        assert!(SceneSpec { n_points: 0, ..SceneSpec::default() }.validate().is_err());
    }
}
