use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::refine::{refine_pose, RefineOptions};
use super::{gravity_residual, p3p_solve, Correspondence2D3D, PnpError};
use crate::geom::{CameraIntrinsics, Pose, MIN_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Reprojection inlier threshold in pixels.
    pub inlier_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    /// Gravity gate threshold in degrees.
    pub tau_eps: f64,
    pub gravity_gate: bool,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_px: 5.0, max_iters: 10_000, confidence: 0.9999, tau_eps: 2.0, gravity_gate: true, seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PnpError> {
        if !(self.inlier_px > 0.0) {
            return Err(PnpError::Config("inlier_px must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PnpError::Config("confidence must lie in (0, 1)".into()));
        }
        if !(self.tau_eps > 0.0) {
            return Err(PnpError::Config("tau_eps must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(PnpError::Config("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacReport {
    pub pose: Pose,
    /// Ascending indices into the input matches.
    pub inliers: Vec<usize>,
    /// Minimal samples drawn, including degenerate and fully gated ones.
    pub iterations: usize,
    pub hypotheses_scored: usize,
    pub hypotheses_gated: usize,
    pub wall_time: f64,
}

/// Number of samples needed to draw one all-inlier triplet with probability
/// `confidence` at inlier ratio `w`.
pub fn adaptive_bound(w: f64, confidence: f64) -> f64 {
    let p = w.powi(3);
    if p <= 0.0 {
        return f64::INFINITY;
    }
    if p >= 1.0 {
        return 1.0;
    }
    ((1.0 - confidence).ln() / (1.0 - p).ln()).ceil().max(1.0)
}

/// Indices of matches reprojecting within `threshold` pixels.
pub fn count_inliers(pose: &Pose, matches: &[Correspondence2D3D], k: &CameraIntrinsics, threshold: f64) -> Vec<usize> {
    let t2 = threshold * threshold;
    matches
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let pc = pose.transform(&m.point);
            if pc.z <= MIN_DEPTH {
                return None;
            }
            let px = k.project_camera(&pc)?;
            ((px - m.pixel).norm_squared() <= t2).then_some(i)
        })
        .collect()
}

fn subset(matches: &[Correspondence2D3D], idx: &[usize]) -> Vec<Correspondence2D3D> {
    idx.iter().map(|&i| matches[i]).collect()
}

/// Refines on `inliers` and keeps the result if it does not lose inliers.
fn local_optimize(
    pose: Pose,
    inliers: Vec<usize>,
    matches: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> (Pose, Vec<usize>) {
    if inliers.len() < 4 {
        return (pose, inliers);
    }
    match refine_pose(&pose, &subset(matches, &inliers), k, &RefineOptions::default()) {
        Ok(out) => {
            let refined = count_inliers(&out.pose, matches, k, cfg.inlier_px);
            if refined.len() >= inliers.len() {
                (out.pose, refined)
            } else {
                (pose, inliers)
            }
        }
        Err(_) => (pose, inliers),
    }
}

/// Locally optimized RANSAC over P3P hypotheses.
///
/// With the gate on, hypotheses whose gravity direction is `tau_eps` or more
/// away from the sensor prior's are dropped before scoring. Every drawn sample
/// counts toward both the adaptive bound and `max_iters`, so gating saves the
/// scoring work without lengthening the loop.
pub fn lo_ransac(
    matches: &[Correspondence2D3D],
    intrinsics: &CameraIntrinsics,
    sensor_prior: &Pose,
    cfg: &RansacConfig,
) -> Result<RansacReport, PnpError> {
    cfg.validate()?;
    if matches.len() < 3 {
        return Err(PnpError::TooFew { needed: 3, got: matches.len() });
    }
    let start = Instant::now();
    let n = matches.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_pose = *sensor_prior;
    let mut best: Vec<usize> = Vec::new();
    let mut bound = f64::INFINITY;
    let (mut iterations, mut scored, mut gated) = (0usize, 0usize, 0usize);

    while iterations < cfg.max_iters && (iterations as f64) < bound {
        iterations += 1;
        let idx = rand::seq::index::sample(&mut rng, n, 3);
        let sample = [matches[idx.index(0)], matches[idx.index(1)], matches[idx.index(2)]];
        let Ok(candidates) = p3p_solve(&sample, intrinsics) else { continue };
        for cand in candidates {
            if cfg.gravity_gate && gravity_residual(&cand, sensor_prior) >= cfg.tau_eps {
                gated += 1;
                continue;
            }
            scored += 1;
            let inl = count_inliers(&cand, matches, intrinsics, cfg.inlier_px);
            if inl.len() > best.len() {
                (best_pose, best) = local_optimize(cand, inl, matches, intrinsics, cfg);
                bound = adaptive_bound(best.len() as f64 / n as f64, cfg.confidence);
            }
        }
    }

    if best.len() < 4 {
        return Err(PnpError::NoConsensus {
            best_inliers: best.len(),
            iterations,
            hypotheses_scored: scored,
            hypotheses_gated: gated,
        });
    }
    for _ in 0..3 {
        let (pose, inl) = local_optimize(best_pose, best.clone(), matches, intrinsics, cfg);
        let stable = inl == best;
        (best_pose, best) = (pose, inl);
        if stable {
            break;
        }
    }
    Ok(RansacReport {
        pose: best_pose,
        inliers: best,
        iterations,
        hypotheses_scored: scored,
        hypotheses_gated: gated,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
