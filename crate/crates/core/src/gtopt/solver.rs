use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::problem::TrajectoryProblem;
use super::residuals::{apply_update_in_place, build_residuals, ParamBlock, ResidualSet, ResidualWeights, Term};
use super::GtoptError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub initial_lambda: f64,
    /// Stop when the largest gradient entry falls below this.
    pub gradient_tol: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_tol: f64,
    /// Huber threshold in sigmas on reprojection terms; `None` disables it.
    pub huber: Option<f64>,
    /// Whitened reprojection residual above which an observation is
    /// discarded after a converged round; `None` keeps everything.
    pub reject_sigma: Option<f64>,
    pub rejection_rounds: usize,
    /// Re-run preintegration at the final bias estimate.
    pub repreintegrate: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            initial_lambda: 1e-4,
            gradient_tol: 1e-8,
            relative_tol: 1e-10,
            huber: Some(2.0),
            reject_sigma: Some(5.0),
            rejection_rounds: 2,
            repreintegrate: true,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), GtoptError> {
        if !(self.initial_lambda > 0.0) || !(self.gradient_tol >= 0.0) || !(self.relative_tol >= 0.0) {
            return Err(GtoptError::Options("lambda must be positive and tolerances non-negative".into()));
        }
        if self.huber.is_some_and(|k| !(k > 0.0)) || self.reject_sigma.is_some_and(|k| !(k > 0.0)) {
            return Err(GtoptError::Options("robust thresholds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientTolerance,
    RelativeDecrease,
    MaxIterations,
    /// Damping grew without finding a cheaper step.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmStep {
    pub lambda: f64,
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub steps: Vec<LmStep>,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub termination: Termination,
    pub converged: bool,
    /// Reprojection observations behind the camera at the final state.
    pub dropped_observations: usize,
    /// Gross outliers removed between rounds.
    pub rejected_observations: usize,
}

/// Parameter layout: frames first (9 each), then the bias pair (6).
/// Landmarks are eliminated and live outside the reduced system.
struct Layout {
    n_frames: usize,
    n_landmarks: usize,
}

impl Layout {
    fn reduced_dim(&self) -> usize {
        9 * self.n_frames + 6
    }

    fn offset(&self, b: ParamBlock) -> Option<usize> {
        match b {
            ParamBlock::Frame(i) => Some(9 * i),
            ParamBlock::Bias => Some(9 * self.n_frames),
            ParamBlock::Landmark(_) => None,
        }
    }
}

/// Gauss-Newton system split into the reduced block, landmark diagonal
/// blocks and their coupling.
struct Normal {
    h_cc: DMatrix<f64>,
    g_c: DVector<f64>,
    h_ll: Vec<Matrix3<f64>>,
    g_l: Vec<Vector3<f64>>,
    /// (landmark, frame) -> 9x3 coupling block.
    w: HashMap<(usize, usize), DMatrix<f64>>,
}

fn assemble(set: &ResidualSet, layout: &Layout, huber: Option<f64>) -> Normal {
    let n = layout.reduced_dim();
    let mut sys = Normal {
        h_cc: DMatrix::zeros(n, n),
        g_c: DVector::zeros(n),
        h_ll: vec![Matrix3::zeros(); layout.n_landmarks],
        g_l: vec![Vector3::zeros(); layout.n_landmarks],
        w: HashMap::new(),
    };
    for block in &set.blocks {
        let wt = block.irls_weight(huber);
        let r = &block.whitened;
        for (a, ja) in &block.jacobians {
            let ga = ja.transpose() * r * wt;
            match *a {
                ParamBlock::Landmark(l) => {
                    sys.g_l[l] += Vector3::new(ga[0], ga[1], ga[2]);
                }
                _ => {
                    let oa = layout.offset(*a).unwrap_or(0);
                    let mut seg = sys.g_c.rows_mut(oa, a.dim());
                    seg += &ga;
                }
            }
            for (b, jb) in &block.jacobians {
                let hab = ja.transpose() * jb * wt;
                match (*a, *b) {
                    (ParamBlock::Landmark(l), ParamBlock::Landmark(m)) if l == m => {
                        sys.h_ll[l] += Matrix3::from_fn(|i, j| hab[(i, j)]);
                    }
                    (ParamBlock::Landmark(_), _) | (_, ParamBlock::Landmark(_)) => {
                        if let (ParamBlock::Frame(f), ParamBlock::Landmark(l)) = (*a, *b) {
                            let e = sys.w.entry((l, f)).or_insert_with(|| DMatrix::zeros(9, 3));
                            *e += &hab;
                        }
                    }
                    _ => {
                        let (oa, ob) = (layout.offset(*a).unwrap_or(0), layout.offset(*b).unwrap_or(0));
                        let mut v = sys.h_cc.view_mut((oa, ob), (a.dim(), b.dim()));
                        v += &hab;
                    }
                }
            }
        }
    }
    sys
}

fn max_gradient(sys: &Normal) -> f64 {
    let gl = sys.g_l.iter().map(|g| g.amax()).fold(0.0, f64::max);
    sys.g_c.amax().max(gl)
}

fn damp(d: f64, lambda: f64) -> f64 {
    // Zero-information directions still get a positive pivot.
    lambda * (d + 1e-6)
}

/// Solves the damped system by eliminating landmarks. Returns the reduced
/// step and the per-landmark steps.
fn solve_damped(sys: &Normal, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let n = sys.g_c.len();
    let mut s = sys.h_cc.clone();
    for i in 0..n {
        s[(i, i)] += damp(sys.h_cc[(i, i)], lambda);
    }
    let mut rhs = -&sys.g_c;

    let mut by_landmark: Vec<Vec<(usize, &DMatrix<f64>)>> = vec![Vec::new(); sys.h_ll.len()];
    for ((l, f), w) in &sys.w {
        by_landmark[*l].push((*f, w));
    }
    for v in &mut by_landmark {
        v.sort_by_key(|(f, _)| *f);
    }
    let mut h_inv = Vec::with_capacity(sys.h_ll.len());
    for (l, h) in sys.h_ll.iter().enumerate() {
        let mut hd = *h;
        for i in 0..3 {
            hd[(i, i)] += damp(h[(i, i)], lambda);
        }
        let inv = hd.try_inverse()?;
        let inv_d = DMatrix::from_fn(3, 3, |i, j| inv[(i, j)]);
        let gl = DVector::from_column_slice(sys.g_l[l].as_slice());
        let couplings = &by_landmark[l];
        let wi: Vec<DMatrix<f64>> = couplings.iter().map(|(_, w)| *w * &inv_d).collect();
        for (a, (fa, _)) in couplings.iter().enumerate() {
            let mut seg = rhs.rows_mut(9 * fa, 9);
            seg += &wi[a] * &gl;
            for (fb, wb) in couplings.iter() {
                let mut v = s.view_mut((9 * fa, 9 * fb), (9, 9));
                v -= &wi[a] * wb.transpose();
            }
        }
        h_inv.push(inv);
    }

    let dc = match s.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => s.lu().solve(&rhs)?,
    };
    let mut dl = Vec::with_capacity(sys.h_ll.len());
    for (l, inv) in h_inv.iter().enumerate() {
        let mut r = -sys.g_l[l];
        for (f, w) in &by_landmark[l] {
            let wt = w.transpose() * dc.rows(9 * f, 9);
            r -= Vector3::new(wt[0], wt[1], wt[2]);
        }
        dl.push(inv * r);
    }
    Some((dc, dl))
}

fn apply(problem: &TrajectoryProblem, layout: &Layout, dc: &DVector<f64>, dl: &[Vector3<f64>]) -> TrajectoryProblem {
    let mut p = problem.clone();
    for i in 0..layout.n_frames {
        apply_update_in_place(&mut p, ParamBlock::Frame(i), dc.rows(9 * i, 9).as_slice());
    }
    apply_update_in_place(&mut p, ParamBlock::Bias, dc.rows(9 * layout.n_frames, 6).as_slice());
    for (j, d) in dl.iter().enumerate() {
        apply_update_in_place(&mut p, ParamBlock::Landmark(j), d.as_slice());
    }
    p
}

struct LmState {
    cost_history: Vec<f64>,
    steps: Vec<LmStep>,
    iterations: usize,
    lambda: f64,
}

fn run_lm(
    cur: &mut TrajectoryProblem,
    weights: &ResidualWeights,
    opts: &SolveOptions,
    state: &mut LmState,
) -> (Termination, ResidualSet) {
    let layout = Layout { n_frames: cur.frames.len(), n_landmarks: cur.landmarks.len() };
    let mut set = build_residuals(cur, weights, true);
    let mut cost = set.cost(opts.huber);
    for _ in 0..opts.max_iters {
        let sys = assemble(&set, &layout, opts.huber);
        if max_gradient(&sys) <= opts.gradient_tol {
            return (Termination::GradientTolerance, set);
        }
        state.iterations += 1;
        loop {
            let lambda = state.lambda;
            let candidate = solve_damped(&sys, lambda).map(|(dc, dl)| apply(cur, &layout, &dc, &dl));
            let eval = candidate.map(|c| {
                let s = build_residuals(&c, weights, false);
                (c, s.cost(opts.huber), s.dropped)
            });
            match eval {
                Some((c, new_cost, dropped)) if new_cost < cost && dropped <= set.dropped && new_cost.is_finite() => {
                    state.steps.push(LmStep { lambda, cost: new_cost, accepted: true });
                    let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    *cur = c;
                    cost = new_cost;
                    state.cost_history.push(cost);
                    set = build_residuals(cur, weights, true);
                    state.lambda = (lambda * 0.1).max(1e-12);
                    if rel < opts.relative_tol {
                        return (Termination::RelativeDecrease, set);
                    }
                    break;
                }
                other => {
                    let c = other.map(|(_, c, _)| c).unwrap_or(f64::INFINITY);
                    state.steps.push(LmStep { lambda, cost: c, accepted: false });
                    state.lambda = lambda * 10.0;
                    if state.lambda > 1e16 {
                        return (Termination::Stalled, set);
                    }
                }
            }
        }
    }
    (Termination::MaxIterations, set)
}

/// Removes reprojection observations whose whitened residual exceeds
/// `threshold`; returns how many were removed.
fn reject_outliers(p: &mut TrajectoryProblem, set: &ResidualSet, threshold: f64) -> usize {
    let mut bad_sl = vec![false; p.obs_sl.len()];
    let mut bad_vo = vec![false; p.obs_vo.len()];
    for b in set.blocks.iter().filter(|b| b.whitened.norm() > threshold) {
        match b.term {
            Term::SelfLocalization => bad_sl[b.index] = true,
            Term::VisualOdometry => bad_vo[b.index] = true,
            _ => {}
        }
    }
    let n = bad_sl.iter().chain(&bad_vo).filter(|x| **x).count();
    let mut it = bad_sl.iter();
    p.obs_sl.retain(|_| !*it.next().unwrap_or(&false));
    let mut it = bad_vo.iter();
    p.obs_vo.retain(|_| !*it.next().unwrap_or(&false));
    n
}

/// Levenberg-Marquardt over frame poses, velocities, the bias pair and VO
/// landmarks. Steps are accepted only when the robust cost drops and no
/// additional observation falls behind a camera. With `reject_sigma` set,
/// each converged round is followed by removal of gross reprojection
/// outliers and another round; the returned problem omits them.
pub fn solve(
    problem: &TrajectoryProblem,
    weights: &ResidualWeights,
    opts: &SolveOptions,
) -> Result<(TrajectoryProblem, SolveReport), GtoptError> {
    problem.validate()?;
    weights.validate()?;
    opts.validate()?;
    let mut cur = problem.clone();
    let initial_cost = build_residuals(&cur, weights, false).cost(opts.huber);
    let mut state = LmState { cost_history: vec![initial_cost], steps: Vec::new(), iterations: 0, lambda: opts.initial_lambda };
    let mut rejected = 0;
    let mut termination;
    let mut round = 0;
    loop {
        let (term, set) = run_lm(&mut cur, weights, opts, &mut state);
        termination = term;
        round += 1;
        let Some(k) = opts.reject_sigma else { break };
        if round > opts.rejection_rounds {
            break;
        }
        let n = reject_outliers(&mut cur, &set, k);
        if n == 0 {
            break;
        }
        rejected += n;
        // Dropping terms can only lower the cost.
        let c = build_residuals(&cur, weights, false).cost(opts.huber);
        state.cost_history.push(c);
        state.lambda = opts.initial_lambda;
    }

    if opts.repreintegrate && !cur.imu.is_empty() {
        cur.repreintegrate();
    }
    let final_set = build_residuals(&cur, weights, false);
    let final_cost = final_set.cost(opts.huber);
    let converged = matches!(termination, Termination::GradientTolerance | Termination::RelativeDecrease);
    if !converged {
        log::warn!("trajectory optimization stopped without converging: {termination:?}");
    }
    if final_set.dropped > 0 {
        log::warn!("{} observations behind the camera were dropped", final_set.dropped);
    }
    let accepted_steps = state.steps.iter().filter(|s| s.accepted).count();
    Ok((
        cur,
        SolveReport {
            initial_cost,
            final_cost,
            cost_history: state.cost_history,
            steps: state.steps,
            iterations: state.iterations,
            accepted_steps,
            termination,
            converged,
            dropped_observations: final_set.dropped,
            rejected_observations: rejected,
        },
    ))
}
