//! On-disk dataset layout.
//!
//! ```text
//! scene.json                 generator spec, camera, default altitude
//! index.sldx / index.txt     reference descriptors and poses
//! points.slsm / points.txt   map points with tracks
//! features/ref_<id>.slfm     reference feature maps
//! features/query_<id>.slfm   query feature maps
//! queries.jsonl              sensor log, one record per query
//! query_descriptors.jsonl    {"id", "descriptor"} per query
//! groundtruth.csv            query poses; read only by evaluation
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use priorloc_core::geom::{CameraIntrinsics, Pose, Rotation};
use priorloc_core::matching::{FeatureMaps, SubMap};
use priorloc_core::retrieval::{DescriptorIndex, ImageId};
use priorloc_core::sensors::{read_sensor_log, write_sensor_log, SensorRecord};

use crate::scene::{SceneSpec, SceneStats};
use crate::CliError;

pub const SCENE_FILE: &str = "scene.json";
pub const INDEX_FILE: &str = "index.sldx";
pub const POINTS_FILE: &str = "points.slsm";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const DESCRIPTORS_FILE: &str = "query_descriptors.jsonl";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";

pub fn ref_map_name(id: ImageId) -> String {
    format!("ref_{id}.slfm")
}

pub fn query_map_name(id: u32) -> String {
    format!("query_{id}.slfm")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl From<&CameraIntrinsics> for CameraSpec {
    fn from(k: &CameraIntrinsics) -> Self {
        Self { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, CliError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| CliError::Data(format!("camera: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub spec: SceneSpec,
    pub camera: CameraSpec,
    /// Camera height assumed when a query has no GPS altitude.
    pub default_alt: f64,
    pub stats: SceneStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDescriptor {
    pub id: u32,
    pub descriptor: Vec<f32>,
}

/// Ground-truth camera center and world-from-camera quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub query_id: u32,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub qw: f64,
}

impl TruthRow {
    pub fn from_pose(query_id: u32, pose: &Pose) -> Self {
        let c = pose.center();
        let [qw, qx, qy, qz] = pose.orientation().wxyz();
        Self { query_id, tx: c.x, ty: c.y, tz: c.z, qx, qy, qz, qw }
    }

    pub fn pose(&self) -> Pose {
        Pose::from_orientation(Rotation::from_wxyz(self.qw, self.qx, self.qy, self.qz), Vector3::new(self.tx, self.ty, self.tz))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_feature_maps(path: &Path, maps: &FeatureMaps) -> Result<(), CliError> {
    let mut w = create(path)?;
    maps.write(&mut w).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_feature_maps(path: &Path) -> Result<FeatureMaps, CliError> {
    FeatureMaps::read(open(path)?).map_err(|e| CliError::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::io(path, e))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::io(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Row type with a fixed header, so an empty table still gets one.
pub trait CsvRow: Serialize {
    const COLUMNS: &'static [&'static str];
}

impl CsvRow for TruthRow {
    const COLUMNS: &'static [&'static str] = &["query_id", "tx", "ty", "tz", "qx", "qy", "qz", "qw"];
}

pub fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(T::COLUMNS).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::io(path, e))).collect()
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>, CliError> {
    read_csv(path)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn write_dataset(
    out: &Path,
    info: &SceneInfo,
    index: &DescriptorIndex,
    submap: &SubMap,
    records: &[SensorRecord],
    descriptors: &[QueryDescriptor],
    truth: &[TruthRow],
) -> Result<(), CliError> {
    let scene = out.join(SCENE_FILE);
    let json = serde_json::to_string_pretty(info).map_err(|e| CliError::io(&scene, e))?;
    write_text(&scene, &(json + "\n"))?;

    let p = out.join(INDEX_FILE);
    let mut w = create(&p)?;
    index.write(&mut w).map_err(|e| CliError::io(&p, e))?;
    w.flush().map_err(|e| CliError::io(&p, e))?;
    write_text(&out.join("index.txt"), &index.debug_dump())?;

    let p = out.join(POINTS_FILE);
    let mut w = create(&p)?;
    submap.write(&mut w).map_err(|e| CliError::io(&p, e))?;
    w.flush().map_err(|e| CliError::io(&p, e))?;
    write_text(&out.join("points.txt"), &submap.debug_dump())?;

    let p = out.join(QUERIES_FILE);
    let mut w = create(&p)?;
    write_sensor_log(&mut w, records).map_err(|e| CliError::io(&p, e))?;
    w.flush().map_err(|e| CliError::io(&p, e))?;

    write_jsonl(&out.join(DESCRIPTORS_FILE), descriptors)?;
    write_csv(&out.join(GROUNDTRUTH_FILE), truth)
}

/// One query as the pipeline sees it: no ground truth.
#[derive(Debug, Clone)]
pub struct QueryInput {
    pub record: SensorRecord,
    pub descriptor: Vec<f32>,
    pub maps_path: PathBuf,
}

/// Everything the localization pipeline reads.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub info: SceneInfo,
    pub camera: CameraIntrinsics,
    pub index: DescriptorIndex,
    pub points: SubMap,
    pub ref_maps: HashMap<ImageId, FeatureMaps>,
    pub queries: Vec<QueryInput>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, CliError> {
        let scene = root.join(SCENE_FILE);
        let text = fs::read_to_string(&scene).map_err(|e| CliError::io(&scene, e))?;
        let info: SceneInfo = serde_json::from_str(&text).map_err(|e| CliError::io(&scene, e))?;
        let camera = info.camera.intrinsics()?;

        let p = root.join(INDEX_FILE);
        let index = DescriptorIndex::read(open(&p)?).map_err(|e| CliError::io(&p, e))?;
        let p = root.join(POINTS_FILE);
        let points = SubMap::read(open(&p)?).map_err(|e| CliError::io(&p, e))?;

        let features = root.join("features");
        let mut ref_maps = HashMap::with_capacity(index.len());
        for e in index.entries() {
            let p = features.join(ref_map_name(e.image_id));
            ref_maps.insert(e.image_id, read_feature_maps(&p)?);
        }

        let p = root.join(QUERIES_FILE);
        let records = read_sensor_log(open(&p)?).map_err(|e| CliError::io(&p, e))?;
        let descs: Vec<QueryDescriptor> = read_jsonl(&root.join(DESCRIPTORS_FILE))?;
        let mut by_id: HashMap<u32, Vec<f32>> = descs.into_iter().map(|d| (d.id, d.descriptor)).collect();
        let mut queries = Vec::with_capacity(records.len());
        for record in records {
            let descriptor = by_id
                .remove(&record.id)
                .ok_or_else(|| CliError::Data(format!("query {} has no global descriptor", record.id)))?;
            if descriptor.len() != index.dim() {
                return Err(CliError::Data(format!(
                    "query {} descriptor has dimension {}, index expects {}",
                    record.id,
                    descriptor.len(),
                    index.dim()
                )));
            }
            let maps_path = features.join(query_map_name(record.id));
            queries.push(QueryInput { record, descriptor, maps_path });
        }
        queries.sort_by_key(|q| q.record.id);
        if queries.windows(2).any(|w| w[0].record.id == w[1].record.id) {
            return Err(CliError::Data("duplicate query id in sensor log".into()));
        }
        Ok(Self { root: root.to_path_buf(), info, camera, index, points, ref_maps, queries })
    }
}
