//! Per-query localization: prior-filtered retrieval, point aggregation and
//! coarse-to-fine matching, then gravity-gated LO-RANSAC.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use priorloc_core::geom::Pose;
use priorloc_core::matching::{aggregate, match_query, FeatureMaps, IdentityTransform};
use priorloc_core::pnp::{lo_ransac, Correspondence2D3D, PnpError, RansacConfig};
use priorloc_core::retrieval::retrieve;
use priorloc_core::sensors::prior_pose;

use crate::config::PipelineConfig;
use crate::dataset::{self, CsvRow, Dataset, QueryInput, TruthRow};
use crate::CliError;

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

/// One row of `results.csv`. Only deterministic quantities; wall times go
/// to `timing.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u32,
    pub status: Status,
    /// Stage that failed, empty on success.
    pub stage: String,
    pub reason: String,
    pub tx: Option<f64>,
    pub ty: Option<f64>,
    pub tz: Option<f64>,
    pub qx: Option<f64>,
    pub qy: Option<f64>,
    pub qz: Option<f64>,
    pub qw: Option<f64>,
    pub n_candidates: usize,
    pub fallback: bool,
    /// Ranked reference ids joined by `;`.
    pub retrieved: String,
    pub n_matches: usize,
    pub n_inliers: usize,
    pub iterations: usize,
    pub hypotheses_scored: usize,
    pub hypotheses_gated: usize,
}

impl QueryResult {
    fn new(query_id: u32) -> Self {
        Self {
            query_id,
            status: Status::Failed,
            stage: String::new(),
            reason: String::new(),
            tx: None,
            ty: None,
            tz: None,
            qx: None,
            qy: None,
            qz: None,
            qw: None,
            n_candidates: 0,
            fallback: false,
            retrieved: String::new(),
            n_matches: 0,
            n_inliers: 0,
            iterations: 0,
            hypotheses_scored: 0,
            hypotheses_gated: 0,
        }
    }

    fn fail(&mut self, stage: &str, reason: impl Into<String>) {
        self.status = Status::Failed;
        self.stage = stage.into();
        self.reason = reason.into();
    }

    fn set_pose(&mut self, pose: &Pose) {
        let t = TruthRow::from_pose(self.query_id, pose);
        (self.tx, self.ty, self.tz) = (Some(t.tx), Some(t.ty), Some(t.tz));
        (self.qx, self.qy, self.qz, self.qw) = (Some(t.qx), Some(t.qy), Some(t.qz), Some(t.qw));
    }

    pub fn pose(&self) -> Option<Pose> {
        let row = TruthRow {
            query_id: self.query_id,
            tx: self.tx?,
            ty: self.ty?,
            tz: self.tz?,
            qx: self.qx?,
            qy: self.qy?,
            qz: self.qz?,
            qw: self.qw?,
        };
        Some(row.pose())
    }

    pub fn retrieved_ids(&self) -> Result<Vec<u32>, CliError> {
        self.retrieved
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Data(format!("query {}: bad retrieved id {s:?}", self.query_id))))
            .collect()
    }
}

impl CsvRow for QueryResult {
    const COLUMNS: &'static [&'static str] = &[
        "query_id",
        "status",
        "stage",
        "reason",
        "tx",
        "ty",
        "tz",
        "qx",
        "qy",
        "qz",
        "qw",
        "n_candidates",
        "fallback",
        "retrieved",
        "n_matches",
        "n_inliers",
        "iterations",
        "hypotheses_scored",
        "hypotheses_gated",
    ];
}

/// Per-stage wall time of one query, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub query_id: u32,
    pub retrieval_ms: f64,
    pub matching_ms: f64,
    pub pnp_ms: f64,
    pub total_ms: f64,
}

impl CsvRow for QueryTiming {
    const COLUMNS: &'static [&'static str] = &["query_id", "retrieval_ms", "matching_ms", "pnp_ms", "total_ms"];
}

/// RANSAC seed for one query, independent of scheduling.
pub fn query_seed(seed: u64, query_id: u32) -> u64 {
    seed ^ (query_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn load_query_maps(q: &QueryInput) -> Result<FeatureMaps, CliError> {
    dataset::read_feature_maps(&q.maps_path)
}

/// Runs the full pipeline for one query. Only I/O problems are errors;
/// everything else is recorded in the result.
pub fn localize_query(ds: &Dataset, q: &QueryInput, cfg: &PipelineConfig) -> Result<(QueryResult, QueryTiming), CliError> {
    let id = q.record.id;
    let query_maps = load_query_maps(q)?;
    let mut res = QueryResult::new(id);
    let mut timing = QueryTiming { query_id: id, retrieval_ms: 0.0, matching_ms: 0.0, pnp_ms: 0.0, total_ms: 0.0 };
    let start = Instant::now();

    let t = Instant::now();
    let prior = match q.record.prior() {
        Ok(p) => p,
        Err(e) => {
            res.fail("sensors", e.to_string());
            timing.total_ms = ms(start);
            return Ok((res, timing));
        }
    };
    let sensor_pose = prior_pose(&prior, ds.info.default_alt);
    let outcome = retrieve(&ds.index, cfg.use_prior.then_some(&sensor_pose), &q.descriptor, &cfg.retrieval);
    timing.retrieval_ms = ms(t);
    res.n_candidates = outcome.candidates;
    res.fallback = outcome.fallback;
    res.retrieved = outcome.ranked.iter().map(u32::to_string).collect::<Vec<_>>().join(";");
    if outcome.ranked.is_empty() {
        res.fail("retrieval", "no reference retrieved");
        timing.total_ms = ms(start);
        return Ok((res, timing));
    }

    let t = Instant::now();
    let submap = ds.points.restrict_to(&outcome.ranked);
    let agg = aggregate(&submap, &ds.ref_maps);
    let matched = match_query(&query_maps, &agg, &cfg.matching, &IdentityTransform);
    timing.matching_ms = ms(t);
    let matches = match matched {
        Ok(m) => m.matches,
        Err(e) => {
            res.fail("matching", e.to_string());
            timing.total_ms = ms(start);
            return Ok((res, timing));
        }
    };
    res.n_matches = matches.len();

    let t = Instant::now();
    let corrs: Vec<_> = matches.iter().map(|m| Correspondence2D3D::new(m.refined_px, m.position, m.confidence)).collect();
    let ransac_cfg = RansacConfig { seed: query_seed(cfg.pnp.seed, id), ..cfg.pnp };
    let solved = lo_ransac(&corrs, &ds.camera, &sensor_pose, &ransac_cfg);
    timing.pnp_ms = ms(t);
    match solved {
        Ok(rep) => {
            res.status = Status::Ok;
            res.set_pose(&rep.pose);
            res.n_inliers = rep.inliers.len();
            res.iterations = rep.iterations;
            res.hypotheses_scored = rep.hypotheses_scored;
            res.hypotheses_gated = rep.hypotheses_gated;
        }
        Err(e) => {
            if let PnpError::NoConsensus { iterations, hypotheses_scored, hypotheses_gated, .. } = e {
                res.iterations = iterations;
                res.hypotheses_scored = hypotheses_scored;
                res.hypotheses_gated = hypotheses_gated;
            }
            res.fail("pnp", e.to_string());
        }
    }
    timing.total_ms = ms(start);
    Ok((res, timing))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Localizes every query in id order. One untimed warm-up query runs first.
pub fn localize_all(ds: &Dataset, cfg: &PipelineConfig) -> Result<(Vec<QueryResult>, Vec<QueryTiming>), CliError> {
    cfg.validate()?;
    if let Some(q) = ds.queries.first() {
        localize_query(ds, q, cfg)?;
    }
    let rows: Vec<_> =
        pool(cfg.threads)?.install(|| ds.queries.par_iter().map(|q| localize_query(ds, q, cfg)).collect::<Result<Vec<_>, _>>())?;
    Ok(rows.into_iter().unzip())
}

pub fn write_results(out: &Path, results: &[QueryResult], timings: &[QueryTiming]) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    dataset::write_csv(&out.join(RESULTS_FILE), results)?;
    dataset::write_csv(&out.join(TIMING_FILE), timings)
}

pub fn read_results(path: &Path) -> Result<Vec<QueryResult>, CliError> {
    dataset::read_csv(path)
}

pub fn read_timings(path: &Path) -> Result<Vec<QueryTiming>, CliError> {
    dataset::read_csv(path)
}

/// Mean and median of each stage over several timed runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

pub fn summarize_timings(timings: &[QueryTiming]) -> Vec<StageSummary> {
    let stages: [(&str, fn(&QueryTiming) -> f64); 4] = [
        ("retrieval", |t| t.retrieval_ms),
        ("matching", |t| t.matching_ms),
        ("pnp", |t| t.pnp_ms),
        ("total", |t| t.total_ms),
    ];
    stages
        .iter()
        .map(|(name, f)| {
            let mut v: Vec<f64> = timings.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            StageSummary { stage: name.to_string(), mean_ms: mean, median_ms: percentile(&v, 0.5), p90_ms: percentile(&v, 0.9) }
        })
        .collect()
}

/// Repeats the whole query set `runs` times after one warm-up pass.
pub fn bench(ds: &Dataset, cfg: &PipelineConfig, runs: usize) -> Result<Vec<StageSummary>, CliError> {
    cfg.validate()?;
    if runs == 0 {
        return Err(CliError::Config("bench needs at least one run".into()));
    }
    let pool = pool(cfg.threads)?;
    let run = || pool.install(|| ds.queries.par_iter().map(|q| localize_query(ds, q, cfg)).collect::<Result<Vec<_>, _>>());
    run()?;
    let mut all = Vec::with_capacity(runs * ds.queries.len());
    for _ in 0..runs {
        all.extend(run()?.into_iter().map(|(_, t)| t));
    }
    Ok(summarize_timings(&all))
}

pub fn timing_summary_csv(rows: &[StageSummary]) -> String {
    let mut s = String::from("stage,mean_ms,median_ms,p90_ms\n");
    for r in rows {
        s.push_str(&format!("{},{:.3},{:.3},{:.3}\n", r.stage, r.mean_ms, r.median_ms, r.p90_ms));
    }
    s
}
