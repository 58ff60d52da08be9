use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::GtoptError;
use crate::geom::{kabsch, Rotation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpOptions {
    pub max_iters: usize,
    /// Stop when the RMSE changes by less than this (meters).
    pub rmse_tol: f64,
    /// Nearest-neighbor pairs farther apart than this are ignored.
    pub max_pair_distance: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self { max_iters: 50, rmse_tol: 1e-6, max_pair_distance: f64::INFINITY }
    }
}

/// Rigid transform `target ~= rotation * source + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    /// Over the final correspondence set.
    pub rmse: f64,
    /// Final `(source, target)` index pairs.
    pub pairs: Vec<(usize, usize)>,
    pub iterations: usize,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * *p + self.translation
    }
}

/// Root-mean-square distance of paired points under `(r, t)`.
pub fn pair_rmse(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    pairs: &[(usize, usize)],
    r: &Rotation,
    t: &Vector3<f64>,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let s: f64 = pairs.iter().map(|&(i, j)| (*r * source[i] + t - target[j]).norm_squared()).sum();
    (s / pairs.len() as f64).sqrt()
}

fn fit(source: &[Vector3<f64>], target: &[Vector3<f64>], pairs: &[(usize, usize)]) -> Result<(Rotation, Vector3<f64>), GtoptError> {
    let src: Vec<_> = pairs.iter().map(|&(i, _)| source[i]).collect();
    let dst: Vec<_> = pairs.iter().map(|&(_, j)| target[j]).collect();
    kabsch(&src, &dst).map_err(|_| GtoptError::Degenerate("fewer than 3 non-collinear correspondences".into()))
}

fn nearest_pairs(moved: &[Vector3<f64>], target: &[Vector3<f64>], max_d: f64) -> Vec<(usize, usize)> {
    let max2 = max_d * max_d;
    moved
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d2) = target
                .iter()
                .enumerate()
                .map(|(j, q)| (j, (p - q).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            (d2 <= max2).then_some((i, j))
        })
        .collect()
}

/// Kabsch on the given correspondences, then ICP with brute-force nearest
/// neighbors until the RMSE settles.
pub fn rigid_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    correspondences: &[(usize, usize)],
    opts: &IcpOptions,
) -> Result<Alignment, GtoptError> {
    if correspondences.iter().any(|&(i, j)| i >= source.len() || j >= target.len()) {
        return Err(GtoptError::Degenerate("correspondence index out of range".into()));
    }
    let mut pairs = correspondences.to_vec();
    let (mut r, mut t) = fit(source, target, &pairs)?;
    let mut rmse = pair_rmse(source, target, &pairs, &r, &t);
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let moved: Vec<_> = source.iter().map(|p| r * *p + t).collect();
        let next = nearest_pairs(&moved, target, opts.max_pair_distance);
        let Ok((r2, t2)) = fit(source, target, &next) else { break };
        let rmse2 = pair_rmse(source, target, &next, &r2, &t2);
        let change = (rmse - rmse2).abs();
        (r, t, rmse, pairs) = (r2, t2, rmse2, next);
        if change < opts.rmse_tol {
            break;
        }
    }
    Ok(Alignment { rotation: r, translation: t, rmse, pairs, iterations })
}
