//! Direct 2D-3D matching.
//!
//! 3D points carry feature tracks into the covisible reference images. Their
//! coarse and fine descriptors are bilinear samples of the reference feature
//! maps averaged over the track. A query's flattened coarse map is matched
//! against the point descriptors with a dual softmax followed by a mutual
//! nearest neighbor test and a confidence threshold; each coarse match is
//! then refined to sub-pixel accuracy by the expectation of a softmax
//! heatmap over a `w x w` window of the fine map.
//!
//! Grid convention: cell `(gx, gy)` of a grid with stride `s` sits at pixel
//! `(s * gx, s * gy)`. A coarse cell `(cx, cy)` therefore maps onto fine cell
//! `(4 cx, 4 cy)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Point2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{self, FormatError};
use crate::retrieval::ImageId;

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;
const STRIDE_RATIO: usize = COARSE_STRIDE / FINE_STRIDE;

const FM_MAGIC: &[u8; 4] = b"SLFM";
const SM_MAGIC: &[u8; 4] = b"SLSM";
const SM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("image size {width}x{height} is not a multiple of the coarse stride")]
    ImageSize { width: usize, height: usize },
    #[error("grid buffer has {got} values, expected {expected}")]
    GridSize { expected: usize, got: usize },
    #[error("descriptor dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid match config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Coarse (stride 8) and fine (stride 2) dense feature grids of one image,
/// row-major, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    height: usize,
    width: usize,
    coarse_dim: usize,
    fine_dim: usize,
    coarse: Vec<f32>,
    fine: Vec<f32>,
}

impl FeatureMaps {
    pub fn zeros(height: usize, width: usize, coarse_dim: usize, fine_dim: usize) -> Result<Self, MatchError> {
        if height == 0 || width == 0 || height % COARSE_STRIDE != 0 || width % COARSE_STRIDE != 0 {
            return Err(MatchError::ImageSize { width, height });
        }
        let nc = (height / COARSE_STRIDE) * (width / COARSE_STRIDE) * coarse_dim;
        let nf = (height / FINE_STRIDE) * (width / FINE_STRIDE) * fine_dim;
        Ok(Self { height, width, coarse_dim, fine_dim, coarse: vec![0.0; nc], fine: vec![0.0; nf] })
    }

    pub fn from_grids(
        height: usize,
        width: usize,
        coarse_dim: usize,
        fine_dim: usize,
        coarse: Vec<f32>,
        fine: Vec<f32>,
    ) -> Result<Self, MatchError> {
        let mut m = Self::zeros(height, width, coarse_dim, fine_dim)?;
        if coarse.len() != m.coarse.len() {
            return Err(MatchError::GridSize { expected: m.coarse.len(), got: coarse.len() });
        }
        if fine.len() != m.fine.len() {
            return Err(MatchError::GridSize { expected: m.fine.len(), got: fine.len() });
        }
        m.coarse = coarse;
        m.fine = fine;
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_dim
    }

    pub fn fine_dim(&self) -> usize {
        self.fine_dim
    }

    /// Coarse grid size `(columns, rows)`.
    pub fn coarse_shape(&self) -> (usize, usize) {
        (self.width / COARSE_STRIDE, self.height / COARSE_STRIDE)
    }

    /// Fine grid size `(columns, rows)`.
    pub fn fine_shape(&self) -> (usize, usize) {
        (self.width / FINE_STRIDE, self.height / FINE_STRIDE)
    }

    pub fn coarse_cells(&self) -> usize {
        let (w, h) = self.coarse_shape();
        w * h
    }

    pub fn coarse_at(&self, gx: usize, gy: usize) -> &[f32] {
        let i = (gy * self.coarse_shape().0 + gx) * self.coarse_dim;
        &self.coarse[i..i + self.coarse_dim]
    }

    pub fn coarse_at_mut(&mut self, gx: usize, gy: usize) -> &mut [f32] {
        let i = (gy * self.coarse_shape().0 + gx) * self.coarse_dim;
        &mut self.coarse[i..i + self.coarse_dim]
    }

    pub fn fine_at(&self, gx: usize, gy: usize) -> &[f32] {
        let i = (gy * self.fine_shape().0 + gx) * self.fine_dim;
        &self.fine[i..i + self.fine_dim]
    }

    pub fn fine_at_mut(&mut self, gx: usize, gy: usize) -> &mut [f32] {
        let i = (gy * self.fine_shape().0 + gx) * self.fine_dim;
        &mut self.fine[i..i + self.fine_dim]
    }

    pub fn coarse_raw(&self) -> &[f32] {
        &self.coarse
    }

    pub fn fine_raw(&self) -> &[f32] {
        &self.fine
    }

    pub fn coarse_raw_mut(&mut self) -> &mut [f32] {
        &mut self.coarse
    }

    pub fn fine_raw_mut(&mut self) -> &mut [f32] {
        &mut self.fine
    }

    /// Pixel position of coarse cell `index` (flattened, row-major).
    pub fn coarse_cell_pixel(&self, index: usize) -> Point2<f64> {
        let gw = self.coarse_shape().0;
        Point2::new(((index % gw) * COARSE_STRIDE) as f64, ((index / gw) * COARSE_STRIDE) as f64)
    }

    /// Flattened coarse map as an `N x C_c` matrix.
    pub fn coarse_matrix(&self) -> DMatrix<f64> {
        let n = self.coarse_cells();
        DMatrix::from_fn(n, self.coarse_dim, |i, c| self.coarse[i * self.coarse_dim + c] as f64)
    }

    pub fn sample_coarse(&self, px: &Point2<f64>) -> Vec<f64> {
        let (w, h) = self.coarse_shape();
        bilinear(&self.coarse, w, h, self.coarse_dim, px.x / COARSE_STRIDE as f64, px.y / COARSE_STRIDE as f64)
    }

    pub fn sample_fine(&self, px: &Point2<f64>) -> Vec<f64> {
        let (w, h) = self.fine_shape();
        bilinear(&self.fine, w, h, self.fine_dim, px.x / FINE_STRIDE as f64, px.y / FINE_STRIDE as f64)
    }

    pub fn contains(&self, px: &Point2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// `SLFM` file: magic, H, W, C_c, C_f (u32), coarse grid, fine grid (f32).
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        binio::write_magic(&mut w, FM_MAGIC)?;
        for v in [self.height, self.width, self.coarse_dim, self.fine_dim] {
            binio::write_u32(&mut w, v as u32)?;
        }
        binio::write_f32_slice(&mut w, &self.coarse)?;
        binio::write_f32_slice(&mut w, &self.fine)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, MatchError> {
        binio::read_magic(&mut r, FM_MAGIC)?;
        let io = |e: std::io::Error| MatchError::Format(e.into());
        let height = binio::read_u32(&mut r).map_err(io)? as usize;
        let width = binio::read_u32(&mut r).map_err(io)? as usize;
        let coarse_dim = binio::read_u32(&mut r).map_err(io)? as usize;
        let fine_dim = binio::read_u32(&mut r).map_err(io)? as usize;
        let mut m = Self::zeros(height, width, coarse_dim, fine_dim)?;
        m.coarse = binio::read_f32_vec(&mut r, m.coarse.len()).map_err(io)?;
        m.fine = binio::read_f32_vec(&mut r, m.fine.len()).map_err(io)?;
        Ok(m)
    }
}

/// Bilinear interpolation at continuous grid coordinates, clamped to the grid.
fn bilinear(grid: &[f32], w: usize, h: usize, dim: usize, gx: f64, gy: f64) -> Vec<f64> {
    let gx = gx.clamp(0.0, (w - 1) as f64);
    let gy = gy.clamp(0.0, (h - 1) as f64);
    let x0 = (gx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let at = |x: usize, y: usize| &grid[(y * w + x) * dim..(y * w + x + 1) * dim];
    let corners = [
        (at(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (at(x1, y0), fx * (1.0 - fy)),
        (at(x0, y1), (1.0 - fx) * fy),
        (at(x1, y1), fx * fy),
    ];
    let mut out = vec![0.0; dim];
    for (cell, wgt) in corners {
        if wgt == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(cell) {
            *o += wgt * *v as f64;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackObservation {
    pub image_id: ImageId,
    pub pixel: Point2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: u32,
    pub position: Vector3<f64>,
    pub track: Vec<TrackObservation>,
}

/// 3D points with their feature tracks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubMap {
    pub points: Vec<MapPoint>,
}

impl SubMap {
    /// Restricts the map to points seen by `images`, keeping only track
    /// entries in those images.
    pub fn restrict_to(&self, images: &[ImageId]) -> SubMap {
        let points = self
            .points
            .iter()
            .filter_map(|p| {
                let track: Vec<_> = p.track.iter().filter(|t| images.contains(&t.image_id)).copied().collect();
                (!track.is_empty()).then(|| MapPoint { id: p.id, position: p.position, track })
            })
            .collect();
        SubMap { points }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FormatError> {
        binio::write_magic(&mut w, SM_MAGIC)?;
        binio::write_u32(&mut w, SM_VERSION)?;
        binio::write_u32(&mut w, self.points.len() as u32)?;
        for p in &self.points {
            binio::write_u32(&mut w, p.id)?;
            for v in p.position.iter() {
                binio::write_f64(&mut w, *v)?;
            }
            binio::write_u32(&mut w, p.track.len() as u32)?;
            for t in &p.track {
                binio::write_u32(&mut w, t.image_id)?;
                binio::write_f64(&mut w, t.pixel.x)?;
                binio::write_f64(&mut w, t.pixel.y)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, FormatError> {
        binio::read_magic(&mut r, SM_MAGIC)?;
        let version = binio::read_u32(&mut r)?;
        if version != SM_VERSION {
            return Err(FormatError::Version(version));
        }
        let n = binio::read_u32(&mut r)? as usize;
        let mut points = Vec::with_capacity(n.min(1 << 22));
        for _ in 0..n {
            let id = binio::read_u32(&mut r)?;
            let position = Vector3::new(binio::read_f64(&mut r)?, binio::read_f64(&mut r)?, binio::read_f64(&mut r)?);
            let len = binio::read_u32(&mut r)? as usize;
            let mut track = Vec::with_capacity(len.min(1 << 16));
            for _ in 0..len {
                let image_id = binio::read_u32(&mut r)?;
                let pixel = Point2::new(binio::read_f64(&mut r)?, binio::read_f64(&mut r)?);
                track.push(TrackObservation { image_id, pixel });
            }
            points.push(MapPoint { id, position, track });
        }
        Ok(SubMap { points })
    }

    pub fn debug_dump(&self) -> String {
        let mut s = format!("# SLSM v{SM_VERSION} points={}\n# id x y z track_len [image_id:u,v ...]\n", self.points.len());
        for p in &self.points {
            let _ = write!(s, "{} {:.4} {:.4} {:.4} {}", p.id, p.position.x, p.position.y, p.position.z, p.track.len());
            for t in &p.track {
                let _ = write!(s, " {}:{:.2},{:.2}", t.image_id, t.pixel.x, t.pixel.y);
            }
            s.push('\n');
        }
        s
    }
}

/// A point with track-averaged descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPoint {
    pub id: u32,
    pub position: Vector3<f64>,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
    pub track_len: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregatedMap {
    /// Sorted by ascending point id.
    pub points: Vec<AggregatedPoint>,
    /// Points without a usable track observation.
    pub excluded: Vec<u32>,
}

impl AggregatedMap {
    pub fn coarse_matrix(&self) -> DMatrix<f64> {
        let dim = self.points.first().map_or(0, |p| p.coarse.len());
        DMatrix::from_fn(self.points.len(), dim, |j, c| self.points[j].coarse[c])
    }
}

/// Average-pools bilinear samples of every track observation. Observations
/// in images without feature maps or outside the image are skipped; points
/// left with no observation are reported in `excluded`.
pub fn aggregate(submap: &SubMap, maps: &HashMap<ImageId, FeatureMaps>) -> AggregatedMap {
    let mut out = AggregatedMap::default();
    for p in &submap.points {
        let mut coarse: Vec<f64> = Vec::new();
        let mut fine: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for obs in &p.track {
            let Some(m) = maps.get(&obs.image_id) else { continue };
            if !m.contains(&obs.pixel) {
                continue;
            }
            let c = m.sample_coarse(&obs.pixel);
            let f = m.sample_fine(&obs.pixel);
            if n == 0 {
                coarse = c;
                fine = f;
            } else {
                coarse.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
                fine.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            }
            n += 1;
        }
        if n == 0 {
            out.excluded.push(p.id);
            continue;
        }
        let inv = 1.0 / n as f64;
        coarse.iter_mut().for_each(|v| *v *= inv);
        fine.iter_mut().for_each(|v| *v *= inv);
        out.points.push(AggregatedPoint { id: p.id, position: p.position, coarse, fine, track_len: n });
    }
    out.points.sort_by_key(|p| p.id);
    out.excluded.sort_unstable();
    if !out.excluded.is_empty() {
        log::debug!("{} points without visible track excluded from matching", out.excluded.len());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Softmax temperature.
    pub temperature: f64,
    /// Coarse confidence threshold.
    pub theta: f64,
    /// Fine window size (odd).
    pub window: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self::day()
    }
}

impl MatchConfig {
    pub fn day() -> Self {
        Self { temperature: 0.1, theta: 0.05, window: 5 }
    }

    pub fn night() -> Self {
        Self { theta: 0.005, ..Self::day() }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        if !(self.temperature > 0.0) {
            return Err(MatchError::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(MatchError::Config("theta must lie in [0, 1]".into()));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(MatchError::Config("window must be odd and at least 3".into()));
        }
        Ok(())
    }
}

/// Seam for learned feature transforms applied before correlation.
pub trait DescriptorTransform: Send + Sync {
    /// Transforms the flattened query coarse map (`N x C`) and the point
    /// descriptors (`M x C`) jointly.
    fn coarse(&self, _query: &mut DMatrix<f64>, _points: &mut DMatrix<f64>) {}

    /// Transforms a fine window (`w*w x C`) and one point's fine descriptor.
    fn fine(&self, _window: &mut DMatrix<f64>, _point: &mut DVector<f64>) {}
}

/// Leaves descriptors unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTransform;

impl DescriptorTransform for IdentityTransform {}

/// `C(i, j) = <query_i, point_j> / temperature`.
pub fn correlation(query: &DMatrix<f64>, points: &DMatrix<f64>, temperature: f64) -> DMatrix<f64> {
    (query * points.transpose()) / temperature
}

/// Product of the row-wise and the column-wise softmax of `c`.
pub fn dual_softmax(c: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = c.shape();
    let mut row = DMatrix::zeros(n, m);
    for i in 0..n {
        let mx = c.row(i).max();
        let mut sum = 0.0;
        for j in 0..m {
            let e = (c[(i, j)] - mx).exp();
            row[(i, j)] = e;
            sum += e;
        }
        for j in 0..m {
            row[(i, j)] /= sum;
        }
    }
    let mut out = row;
    for j in 0..m {
        let mx = c.column(j).max();
        let sum: f64 = (0..n).map(|i| (c[(i, j)] - mx).exp()).sum();
        for i in 0..n {
            out[(i, j)] *= (c[(i, j)] - mx).exp() / sum;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    pub cell: usize,
    /// Row index into the point matrix.
    pub point: usize,
    pub probability: f64,
}

/// Pairs that are each other's best entry in the probability matrix (ties to
/// the lowest index) and meet `theta`. Sorted by cell.
pub fn mutual_nearest(prob: &DMatrix<f64>, theta: f64) -> Vec<CoarseMatch> {
    let (n, m) = prob.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let argmax_row: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..m {
                if prob[(i, j)] > prob[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let argmax_col: Vec<usize> = (0..m)
        .map(|j| {
            let mut best = 0;
            for i in 1..n {
                if prob[(i, j)] > prob[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect();
    (0..n)
        .filter_map(|i| {
            let j = argmax_row[i];
            let p = prob[(i, j)];
            (argmax_col[j] == i && p >= theta).then_some(CoarseMatch { cell: i, point: j, probability: p })
        })
        .collect()
}

/// Coarse matching of query cells against point descriptors.
pub fn coarse_match(
    query_coarse: &DMatrix<f64>,
    points_coarse: &DMatrix<f64>,
    cfg: &MatchConfig,
    transform: &dyn DescriptorTransform,
) -> Result<Vec<CoarseMatch>, MatchError> {
    if points_coarse.nrows() > 0 && query_coarse.ncols() != points_coarse.ncols() {
        return Err(MatchError::Dimension { expected: query_coarse.ncols(), got: points_coarse.ncols() });
    }
    let mut q = query_coarse.clone();
    let mut p = points_coarse.clone();
    transform.coarse(&mut q, &mut p);
    let c = correlation(&q, &p, cfg.temperature);
    Ok(mutual_nearest(&dual_softmax(&c), cfg.theta))
}

/// Window of the fine grid used to refine a coarse cell: origin and size in
/// fine-grid cells. Clamped (shifted) to stay inside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FineWindow {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl FineWindow {
    /// Pixel bounding box `(min, max)` of the window's cell positions.
    pub fn pixel_bounds(&self) -> (Point2<f64>, Point2<f64>) {
        let s = FINE_STRIDE as f64;
        (
            Point2::new(self.x0 as f64 * s, self.y0 as f64 * s),
            Point2::new((self.x0 + self.w - 1) as f64 * s, (self.y0 + self.h - 1) as f64 * s),
        )
    }

    /// Pixel position of the window's central cell.
    pub fn center_pixel(&self) -> Point2<f64> {
        let s = FINE_STRIDE as f64;
        Point2::new((self.x0 + self.w / 2) as f64 * s, (self.y0 + self.h / 2) as f64 * s)
    }
}

pub fn fine_window(maps: &FeatureMaps, cell: usize, window: usize) -> FineWindow {
    let (gw, _) = maps.coarse_shape();
    let (fw, fh) = maps.fine_shape();
    let cx = (cell % gw) * STRIDE_RATIO;
    let cy = (cell / gw) * STRIDE_RATIO;
    let w = window.min(fw);
    let h = window.min(fh);
    let x0 = cx.saturating_sub(window / 2).min(fw - w);
    let y0 = cy.saturating_sub(window / 2).min(fh - h);
    FineWindow { x0, y0, w, h }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineMatch {
    pub pixel: Point2<f64>,
    /// Peak heatmap probability.
    pub confidence: f64,
    pub heatmap: Vec<f64>,
    pub window: FineWindow,
}

/// Sub-pixel refinement of a coarse match: heatmap expectation over the
/// fine window around the coarse cell, in full-image pixels.
pub fn fine_refine(
    cell: usize,
    query: &FeatureMaps,
    point_fine: &[f64],
    cfg: &MatchConfig,
    transform: &dyn DescriptorTransform,
) -> Result<FineMatch, MatchError> {
    if point_fine.len() != query.fine_dim() {
        return Err(MatchError::Dimension { expected: query.fine_dim(), got: point_fine.len() });
    }
    let win = fine_window(query, cell, cfg.window);
    let n = win.w * win.h;
    let mut crop = DMatrix::from_fn(n, query.fine_dim(), |k, c| {
        query.fine_at(win.x0 + k % win.w, win.y0 + k / win.w)[c] as f64
    });
    let mut point = DVector::from_column_slice(point_fine);
    transform.fine(&mut crop, &mut point);
    let logits = (&crop * &point) / cfg.temperature;
    let mx = logits.max();
    let mut heat: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let sum: f64 = heat.iter().sum();
    heat.iter_mut().for_each(|h| *h /= sum);
    let (mut ex, mut ey) = (0.0, 0.0);
    for (k, p) in heat.iter().enumerate() {
        ex += p * (win.x0 + k % win.w) as f64;
        ey += p * (win.y0 + k / win.w) as f64;
    }
    let s = FINE_STRIDE as f64;
    let confidence = heat.iter().cloned().fold(0.0, f64::max);
    Ok(FineMatch { pixel: Point2::new(ex * s, ey * s), confidence, heatmap: heat, window: win })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub point_id: u32,
    pub position: Vector3<f64>,
    pub coarse_cell: usize,
    pub refined_px: Point2<f64>,
    /// Coarse match probability, at least `theta`.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

/// Full coarse-to-fine matching of a query against an aggregated map.
pub fn match_query(
    query: &FeatureMaps,
    map: &AggregatedMap,
    cfg: &MatchConfig,
    transform: &dyn DescriptorTransform,
) -> Result<MatchSet, MatchError> {
    cfg.validate()?;
    if map.points.is_empty() {
        return Ok(MatchSet::default());
    }
    let coarse = coarse_match(&query.coarse_matrix(), &map.coarse_matrix(), cfg, transform)?;
    let mut matches = Vec::with_capacity(coarse.len());
    for cm in coarse {
        let p = &map.points[cm.point];
        let fine = fine_refine(cm.cell, query, &p.fine, cfg, transform)?;
        matches.push(Match {
            point_id: p.id,
            position: p.position,
            coarse_cell: cm.cell,
            refined_px: fine.pixel,
            confidence: cm.probability,
        });
    }
    Ok(MatchSet { matches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-scale..scale))
    }

    fn random_maps(rng: &mut ChaCha8Rng, h: usize, w: usize, cc: usize, cf: usize) -> FeatureMaps {
        let mut m = FeatureMaps::zeros(h, w, cc, cf).unwrap();
        m.coarse_raw_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        m.fine_raw_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        m
    }

    /// Naive double-loop dual softmax without max subtraction.
    fn naive_dual_softmax(c: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = c.shape();
        let mut p = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let row: f64 = (0..m).map(|k| c[(i, k)].exp()).sum();
                let col: f64 = (0..n).map(|k| c[(k, j)].exp()).sum();
                p[(i, j)] = c[(i, j)].exp() / row * (c[(i, j)].exp() / col);
            }
        }
        p
    }

    /// Brute-force MNN: enumerate all pairs and test the definition directly.
    fn naive_mnn(p: &DMatrix<f64>, theta: f64) -> Vec<(usize, usize)> {
        let (n, m) = p.shape();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let row_best = (0..m).all(|k| p[(i, k)] < p[(i, j)] || (p[(i, k)] == p[(i, j)] && k >= j));
                let col_best = (0..n).all(|k| p[(k, j)] < p[(i, j)] || (p[(k, j)] == p[(i, j)] && k >= i));
                if row_best && col_best && p[(i, j)] >= theta {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn dual_softmax_single_element() {
        let p = dual_softmax(&DMatrix::from_element(1, 1, 3.7));
        assert_abs_diff_eq!(p[(0, 0)], 1.0);
    }

    #[test]
    fn dual_softmax_diagonal_dominant() {
        let c = DMatrix::from_row_slice(2, 2, &[10.0, 0.0, 0.0, 10.0]);
        let p = dual_softmax(&c);
        // Closed form: (e^10 / (e^10 + 1))^2.
        let expect = (10f64.exp() / (10f64.exp() + 1.0)).powi(2);
        assert_abs_diff_eq!(p[(0, 0)], expect, epsilon = 1e-12);
        assert!(p[(0, 0)] > 0.99 && p[(1, 1)] > 0.99);
    }

    #[test]
    fn dual_softmax_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let c = random_matrix(&mut rng, 20, 30, 5.0);
            let (a, b) = (dual_softmax(&c), naive_dual_softmax(&c));
            assert!((a - b).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn dual_softmax_bounds_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let c = random_matrix(&mut rng, 7, 9, 4.0);
        let p = dual_softmax(&c);
        for i in 0..7 {
            for j in 0..9 {
                let row: f64 = (0..9).map(|k| c[(i, k)].exp()).sum();
                let col: f64 = (0..7).map(|k| c[(k, j)].exp()).sum();
                let bound = (c[(i, j)].exp() / row).min(c[(i, j)].exp() / col);
                assert!(p[(i, j)] >= 0.0 && p[(i, j)] <= bound + 1e-15);
            }
        }
        // Swap rows 0,3 and columns 2,5.
        let mut cp = c.clone();
        cp.swap_rows(0, 3);
        cp.swap_columns(2, 5);
        let mut pp = p.clone();
        pp.swap_rows(0, 3);
        pp.swap_columns(2, 5);
        assert!((dual_softmax(&cp) - pp).abs().max() < 1e-15);
    }

    #[test]
    fn coarse_match_single_identical() {
        let q = DMatrix::from_row_slice(1, 3, &[0.6, 0.8, 0.0]);
        let cfg = MatchConfig { theta: 0.5, ..MatchConfig::day() };
        let m = coarse_match(&q, &q, &cfg, &IdentityTransform).unwrap();
        assert_eq!(m.len(), 1);
        assert_abs_diff_eq!(m[0].probability, 1.0);
    }

    #[test]
    fn mnn_tie_goes_to_lowest_point() {
        let p = DMatrix::from_row_slice(2, 3, &[0.4, 0.4, 0.1, 0.1, 0.1, 0.3]);
        let m = mutual_nearest(&p, 0.0);
        assert_eq!(m[0], CoarseMatch { cell: 0, point: 0, probability: 0.4 });
        assert_eq!(m.len(), 2);
        assert_eq!((m[1].cell, m[1].point), (1, 2));
    }

    #[test]
    fn coarse_match_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..30 {
            let q = random_matrix(&mut rng, 50, 8, 1.0);
            let p = random_matrix(&mut rng, 40, 8, 1.0);
            let cfg = MatchConfig { theta: rng.random_range(0.0..0.05), ..MatchConfig::day() };
            let got: Vec<_> = coarse_match(&q, &p, &cfg, &IdentityTransform).unwrap().iter().map(|m| (m.cell, m.point)).collect();
            let prob = naive_dual_softmax(&((&q * p.transpose()) / cfg.temperature));
            assert_eq!(got, naive_mnn(&prob, cfg.theta));
        }
    }

    proptest! {
        #[test]
        fn coarse_match_is_partial_injection(seed in 0u64..10_000, n in 1usize..30, m in 1usize..30, theta in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, n, 6, 1.0);
            let p = random_matrix(&mut rng, m, 6, 1.0);
            let cfg = MatchConfig { theta, ..MatchConfig::day() };
            let out = coarse_match(&q, &p, &cfg, &IdentityTransform).unwrap();
            let cells: std::collections::HashSet<_> = out.iter().map(|x| x.cell).collect();
            let pts: std::collections::HashSet<_> = out.iter().map(|x| x.point).collect();
            prop_assert_eq!(cells.len(), out.len());
            prop_assert_eq!(pts.len(), out.len());
            prop_assert!(out.iter().all(|x| x.probability >= theta));
            // Lowering theta keeps every match.
            let lower = coarse_match(&q, &p, &MatchConfig { theta: theta / 2.0, ..cfg }, &IdentityTransform).unwrap();
            for x in &out {
                prop_assert!(lower.contains(x));
            }
        }
    }

    #[test]
    fn aggregate_single_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let m = random_maps(&mut rng, 32, 48, 4, 3);
        let px = Point2::new(13.3, 7.9);
        let sub = SubMap { points: vec![MapPoint { id: 1, position: Vector3::zeros(), track: vec![TrackObservation { image_id: 5, pixel: px }] }] };
        let maps: HashMap<_, _> = [(5, m.clone())].into();
        let agg = aggregate(&sub, &maps);
        assert_eq!(agg.points[0].coarse, m.sample_coarse(&px));
        assert_eq!(agg.points[0].fine, m.sample_fine(&px));

        let mut c = FeatureMaps::zeros(32, 48, 4, 3).unwrap();
        c.coarse_raw_mut().iter_mut().for_each(|v| *v = 0.25);
        c.fine_raw_mut().iter_mut().for_each(|v| *v = -2.0);
        let agg = aggregate(&sub, &[(5, c)].into());
        agg.points[0].coarse.iter().for_each(|v| assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12));
        agg.points[0].fine.iter().for_each(|v| assert_abs_diff_eq!(*v, -2.0, epsilon = 1e-12));
    }

    #[test]
    fn aggregate_mean_of_independent_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let maps: HashMap<ImageId, FeatureMaps> = (0..3).map(|i| (i, random_maps(&mut rng, 40, 40, 5, 4))).collect();
        let track: Vec<_> = (0..3)
            .map(|i| TrackObservation { image_id: i, pixel: Point2::new(rng.random_range(0.0..31.9), rng.random_range(0.0..31.9)) })
            .collect();
        let sub = SubMap { points: vec![MapPoint { id: 9, position: Vector3::zeros(), track: track.clone() }] };
        let agg = aggregate(&sub, &maps);
        // Oracle: bilinear by hand on the coarse grid of each image.
        let mut expect = vec![0.0; 5];
        for t in &track {
            let m = &maps[&t.image_id];
            let (gx, gy) = (t.pixel.x / 8.0, t.pixel.y / 8.0);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            for c in 0..5 {
                let v = m.coarse_at(x0, y0)[c] as f64 * (1.0 - fx) * (1.0 - fy)
                    + m.coarse_at(x0 + 1, y0)[c] as f64 * fx * (1.0 - fy)
                    + m.coarse_at(x0, y0 + 1)[c] as f64 * (1.0 - fx) * fy
                    + m.coarse_at(x0 + 1, y0 + 1)[c] as f64 * fx * fy;
                expect[c] += v / 3.0;
            }
        }
        for (a, b) in agg.points[0].coarse.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn aggregate_excludes_invisible_points() {
        let sub = SubMap {
            points: vec![
                MapPoint { id: 3, position: Vector3::zeros(), track: vec![] },
                MapPoint { id: 4, position: Vector3::zeros(), track: vec![TrackObservation { image_id: 99, pixel: Point2::new(1.0, 1.0) }] },
            ],
        };
        let agg = aggregate(&sub, &HashMap::new());
        assert!(agg.points.is_empty());
        assert_eq!(agg.excluded, vec![3, 4]);
    }

    #[test]
    fn fine_refine_peaked_and_uniform() {
        let mut q = FeatureMaps::zeros(64, 64, 2, 2).unwrap();
        let win = fine_window(&q, 2 * 8 + 3, 5);
        let center = win.center_pixel();
        let (cx, cy) = (win.x0 + 2, win.y0 + 2);
        q.fine_at_mut(cx, cy).copy_from_slice(&[100.0, 0.0]);
        let cfg = MatchConfig::day();
        let r = fine_refine(2 * 8 + 3, &q, &[1.0, 0.0], &cfg, &IdentityTransform).unwrap();
        assert_abs_diff_eq!(r.pixel.coords, center.coords, epsilon = 1e-6);

        let flat = FeatureMaps::zeros(64, 64, 2, 2).unwrap();
        let r = fine_refine(2 * 8 + 3, &flat, &[1.0, 0.0], &cfg, &IdentityTransform).unwrap();
        let (lo, hi) = r.window.pixel_bounds();
        assert_abs_diff_eq!(r.pixel.coords, ((lo.coords + hi.coords) / 2.0), epsilon = 1e-9);
    }

    #[test]
    fn fine_refine_matches_naive_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let q = random_maps(&mut rng, 48, 64, 3, 6);
        let cfg = MatchConfig::day();
        for cell in 0..q.coarse_cells() {
            let d: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = fine_refine(cell, &q, &d, &cfg, &IdentityTransform).unwrap();
            let win = r.window;
            let mut weights = Vec::new();
            for y in win.y0..win.y0 + win.h {
                for x in win.x0..win.x0 + win.w {
                    let s: f64 = q.fine_at(x, y).iter().zip(&d).map(|(a, b)| *a as f64 * b).sum();
                    weights.push(((s / cfg.temperature).exp(), x, y));
                }
            }
            let z: f64 = weights.iter().map(|w| w.0).sum();
            let ex: f64 = weights.iter().map(|w| w.0 / z * 2.0 * w.1 as f64).sum();
            let ey: f64 = weights.iter().map(|w| w.0 / z * 2.0 * w.2 as f64).sum();
            assert_abs_diff_eq!(r.pixel.x, ex, epsilon = 1e-9);
            assert_abs_diff_eq!(r.pixel.y, ey, epsilon = 1e-9);
            let (lo, hi) = win.pixel_bounds();
            assert!(r.pixel.x >= lo.x && r.pixel.x <= hi.x && r.pixel.y >= lo.y && r.pixel.y <= hi.y);
        }
    }

    #[test]
    fn fine_window_clamps_at_borders() {
        let q = FeatureMaps::zeros(32, 32, 1, 1).unwrap();
        assert_eq!(fine_window(&q, 0, 5), FineWindow { x0: 0, y0: 0, w: 5, h: 5 });
        let small = FeatureMaps::zeros(8, 16, 1, 1).unwrap();
        let w = fine_window(&small, 1, 7);
        assert_eq!((w.x0 + w.w, w.y0 + w.h), (small.fine_shape().0, 4));
        assert_eq!(w.h, 4);
    }

    #[test]
    fn config_validation() {
        assert!(MatchConfig { window: 4, ..MatchConfig::day() }.validate().is_err());
        assert!(MatchConfig { temperature: 0.0, ..MatchConfig::day() }.validate().is_err());
        assert!(MatchConfig::night().validate().is_ok());
        assert_eq!(MatchConfig::night().theta, 0.005);
    }

    #[test]
    fn file_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let m = random_maps(&mut rng, 16, 24, 3, 2);
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SLFM");
        assert_eq!(FeatureMaps::read(buf.as_slice()).unwrap(), m);

        let sub = SubMap {
            points: vec![MapPoint {
                id: 2,
                position: Vector3::new(1.0, 2.0, 3.0),
                track: vec![TrackObservation { image_id: 7, pixel: Point2::new(3.5, 4.25) }],
            }],
        };
        let mut buf = Vec::new();
        sub.write(&mut buf).unwrap();
        assert_eq!(SubMap::read(buf.as_slice()).unwrap(), sub);
        assert!(sub.debug_dump().contains("7:3.50,4.25"));
    }
}
