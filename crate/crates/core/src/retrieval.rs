//! Sensor-guided image retrieval.
//!
//! Reference images are first narrowed to those whose camera center lies
//! within `tau_t` meters (horizontal plane only) of the query's prior and
//! whose principal axis is within `tau_o` degrees of the prior's; the
//! survivors are ranked by global-descriptor similarity.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{self, FormatError};
use crate::geom::{angular_diff, Pose, Rotation};

pub type ImageId = u32;

const MAGIC: &[u8; 4] = b"SLDX";
const VERSION: u32 = 1;
const UNIT_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("descriptor of image {image_id} has dimension {got}, index expects {expected}")]
    Dimension { image_id: ImageId, expected: usize, got: usize },
    #[error("descriptor of image {0} is not unit norm")]
    NotUnitNorm(ImageId),
    #[error("duplicate image id {0}")]
    DuplicateId(ImageId),
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub image_id: ImageId,
    pub pose: Pose,
    pub descriptor: Vec<f32>,
    pub observed_point_ids: Vec<u32>,
}

/// Reference images with poses and unit-norm global descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    by_id: HashMap<ImageId, usize>,
}

impl DescriptorIndex {
    pub fn new(dim: usize, entries: Vec<IndexEntry>) -> Result<Self, RetrievalError> {
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.descriptor.len() != dim {
                return Err(RetrievalError::Dimension { image_id: e.image_id, expected: dim, got: e.descriptor.len() });
            }
            if (norm(&e.descriptor) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(RetrievalError::NotUnitNorm(e.image_id));
            }
            if by_id.insert(e.image_id, i).is_some() {
                return Err(RetrievalError::DuplicateId(e.image_id));
            }
        }
        Ok(Self { dim, entries, by_id })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ImageId) -> Option<&IndexEntry> {
        self.by_id.get(&id).map(|&i| &self.entries[i])
    }

    pub fn ids(&self) -> BTreeSet<ImageId> {
        self.entries.iter().map(|e| e.image_id).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        binio::write_magic(&mut w, MAGIC)?;
        binio::write_u32(&mut w, VERSION)?;
        binio::write_u32(&mut w, self.dim as u32)?;
        binio::write_u32(&mut w, self.entries.len() as u32)?;
        for e in &self.entries {
            binio::write_u32(&mut w, e.image_id)?;
            for q in e.pose.rotation().wxyz() {
                binio::write_f64(&mut w, q)?;
            }
            for c in e.pose.center().iter() {
                binio::write_f64(&mut w, *c)?;
            }
            binio::write_f32_slice(&mut w, &e.descriptor)?;
            binio::write_u32(&mut w, e.observed_point_ids.len() as u32)?;
            for id in &e.observed_point_ids {
                binio::write_u32(&mut w, *id)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        binio::read_magic(&mut r, MAGIC)?;
        let version = binio::read_u32(&mut r).map_err(FormatError::from)?;
        if version != VERSION {
            return Err(FormatError::Version(version).into());
        }
        let io = |e: std::io::Error| RetrievalError::Format(e.into());
        let dim = binio::read_u32(&mut r).map_err(io)? as usize;
        let count = binio::read_u32(&mut r).map_err(io)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let image_id = binio::read_u32(&mut r).map_err(io)?;
            let mut q = [0.0; 4];
            for v in q.iter_mut() {
                *v = binio::read_f64(&mut r).map_err(io)?;
            }
            let mut c = [0.0; 3];
            for v in c.iter_mut() {
                *v = binio::read_f64(&mut r).map_err(io)?;
            }
            let descriptor = binio::read_f32_vec(&mut r, dim).map_err(io)?;
            let n_obs = binio::read_u32(&mut r).map_err(io)? as usize;
            let mut observed_point_ids = Vec::with_capacity(n_obs.min(1 << 20));
            for _ in 0..n_obs {
                observed_point_ids.push(binio::read_u32(&mut r).map_err(io)?);
            }
            let pose = Pose::new(Rotation::from_wxyz(q[0], q[1], q[2], q[3]), Vector3::new(c[0], c[1], c[2]));
            entries.push(IndexEntry { image_id, pose, descriptor, observed_point_ids });
        }
        Self::new(dim, entries)
    }

    /// Human-readable dump, one entry per line.
    pub fn debug_dump(&self) -> String {
        let mut s = format!("# SLDX v{VERSION} dim={} entries={}\n", self.dim, self.entries.len());
        s.push_str("# image_id cx cy cz qw qx qy qz n_obs desc[0..4]\n");
        for e in &self.entries {
            let c = e.pose.center();
            let q = e.pose.rotation().wxyz();
            let head: Vec<String> = e.descriptor.iter().take(4).map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(
                s,
                "{} {:.4} {:.4} {:.4} {:.6} {:.6} {:.6} {:.6} {} {}",
                e.image_id,
                c.x,
                c.y,
                c.z,
                q[0],
                q[1],
                q[2],
                q[3],
                e.observed_point_ids.len(),
                head.join(",")
            );
        }
        s
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Horizontal distance threshold in meters.
    pub tau_t: f64,
    /// Principal-axis angle threshold in degrees.
    pub tau_o: f64,
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { tau_t: 20.0, tau_o: 60.0, k: 10 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.tau_t > 0.0) {
            return Err(RetrievalError::Config("tau_t must be positive".into()));
        }
        if !(self.tau_o > 0.0 && self.tau_o <= 180.0) {
            return Err(RetrievalError::Config("tau_o must lie in (0, 180]".into()));
        }
        if self.k == 0 {
            return Err(RetrievalError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Does a reference pose pass the prior's distance and axis gates?
pub fn passes_prior(reference: &Pose, prior: &Pose, tau_t: f64, tau_o: f64) -> bool {
    let d = (reference.planar_translation() - prior.planar_translation()).norm();
    d <= tau_t && angular_diff(&reference.principal_axis(), &prior.principal_axis()) <= tau_o
}

/// Reference images consistent with the query's sensor prior.
pub fn filter_candidates(index: &DescriptorIndex, prior: &Pose, cfg: &RetrievalConfig) -> BTreeSet<ImageId> {
    index
        .entries
        .iter()
        .filter(|e| passes_prior(&e.pose, prior, cfg.tau_t, cfg.tau_o))
        .map(|e| e.image_id)
        .collect()
}

/// Candidates ranked by descending similarity, ties by ascending id, with scores.
pub fn ranked(index: &DescriptorIndex, candidates: &BTreeSet<ImageId>, query_desc: &[f32]) -> Vec<(ImageId, f64)> {
    let mut scored: Vec<(ImageId, f64)> = candidates
        .iter()
        .filter_map(|id| index.get(*id).map(|e| (*id, dot(&e.descriptor, query_desc))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// The `k` candidates closest to the query descriptor. For unit vectors the
/// Euclidean order equals the inner-product order, which is what is computed.
pub fn top_k(index: &DescriptorIndex, candidates: &BTreeSet<ImageId>, query_desc: &[f32], k: usize) -> Vec<ImageId> {
    let mut r = ranked(index, candidates, query_desc);
    r.truncate(k);
    r.into_iter().map(|(id, _)| id).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub ranked: Vec<ImageId>,
    pub candidates: usize,
    /// The prior filter removed every reference and the unfiltered index was used.
    pub fallback: bool,
}

/// Filtered retrieval with fallback to the whole index when the filter is
/// empty. `prior = None` runs plain global retrieval.
pub fn retrieve(index: &DescriptorIndex, prior: Option<&Pose>, query_desc: &[f32], cfg: &RetrievalConfig) -> RetrievalOutcome {
    let (cands, fallback) = match prior {
        Some(p) => {
            let c = filter_candidates(index, p, cfg);
            if c.is_empty() {
                log::info!("prior filter left no candidates; falling back to unfiltered retrieval");
                (index.ids(), true)
            } else {
                (c, false)
            }
        }
        None => (index.ids(), false),
    };
    RetrievalOutcome { ranked: top_k(index, &cands, query_desc, cfg.k), candidates: cands.len(), fallback }
}

/// Rule deciding whether a retrieved reference counts as correct for a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessRule {
    pub max_distance: f64,
    pub max_angle: f64,
}

impl Default for CorrectnessRule {
    fn default() -> Self {
        Self { max_distance: 10.0, max_angle: 30.0 }
    }
}

impl CorrectnessRule {
    pub fn is_correct(&self, reference: &Pose, query_truth: &Pose) -> bool {
        let d = (reference.planar_translation() - query_truth.planar_translation()).norm();
        d <= self.max_distance && angular_diff(&reference.principal_axis(), &query_truth.principal_axis()) < self.max_angle
    }

    /// Correctness labels of one query's ranked list.
    pub fn label(&self, index: &DescriptorIndex, ranked: &[ImageId], query_truth: &Pose) -> Vec<bool> {
        ranked
            .iter()
            .map(|id| index.get(*id).is_some_and(|e| self.is_correct(&e.pose, query_truth)))
            .collect()
    }
}

/// Top-k recall and precision over a query set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalTable {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub queries: usize,
}

/// `labels[q][r]` tells whether the `r`-th retrieved item of query `q` is
/// correct. R@k counts queries with any correct item in the top k; P@k
/// averages the correct fraction of the top k (missing slots count as wrong).
pub fn retrieval_metrics(labels: &[Vec<bool>], ks: &[usize]) -> RetrievalTable {
    let n = labels.len();
    let mut recall = Vec::with_capacity(ks.len());
    let mut precision = Vec::with_capacity(ks.len());
    for &k in ks {
        if n == 0 || k == 0 {
            recall.push(0.0);
            precision.push(0.0);
            continue;
        }
        let mut hits = 0usize;
        let mut prec = 0.0;
        for l in labels {
            let top = &l[..k.min(l.len())];
            let correct = top.iter().filter(|&&c| c).count();
            if correct > 0 {
                hits += 1;
            }
            prec += correct as f64 / k as f64;
        }
        recall.push(hits as f64 / n as f64);
        precision.push(prec / n as f64);
    }
    RetrievalTable { ks: ks.to_vec(), recall, precision, queries: n }
}

impl RetrievalTable {
    /// Column names: `R@k` for every k, `P@k` for every k > 1 (P@1 = R@1).
    pub fn columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for &k in &self.ks {
            cols.push(format!("R@{k}"));
            if k > 1 {
                cols.push(format!("P@{k}"));
            }
        }
        cols
    }

    pub fn values(&self) -> Vec<f64> {
        let mut vals = Vec::new();
        for (i, &k) in self.ks.iter().enumerate() {
            vals.push(self.recall[i]);
            if k > 1 {
                vals.push(self.precision[i]);
            }
        }
        vals
    }

    /// Two-line CSV: header then percentages.
    pub fn to_csv(&self, label: &str) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
        format!("method,{}\n{label},{}\n", self.columns().join(","), vals.join(","))
    }

    pub fn to_text(&self, label: &str) -> String {
        let cols = self.columns();
        let vals = self.values();
        let mut s = format!("{:<20}", "method");
        for c in &cols {
            let _ = write!(s, " {c:>7}");
        }
        let _ = write!(s, "\n{label:<20}");
        for v in &vals {
            let _ = write!(s, " {:>7.2}", 100.0 * v);
        }
        s.push('\n');
        s
    }
}
