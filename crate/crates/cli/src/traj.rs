//! Trajectory refinement on problem files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use priorloc_core::gtopt::synth::{ate_rmse, median, rotation_errors_deg, synthesize, SynthConfig};
use priorloc_core::gtopt::{solve, ResidualWeights, SolveOptions, SolveReport, TrajectoryProblem};

use crate::CliError;

pub const PROBLEM_FILE: &str = "problem.txt";
pub const TRUTH_FILE: &str = "truth.txt";
pub const WEIGHTS_FILE: &str = "weights.json";

fn read_problem(path: &Path) -> Result<TrajectoryProblem, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    TrajectoryProblem::read(BufReader::new(f)).map_err(|e| CliError::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// Writes a synthetic problem, its ground truth and matching weights.
pub fn write_synthetic(out: &Path, frames: usize, seed: u64) -> Result<(), CliError> {
    if frames < 2 {
        return Err(CliError::Config("gtopt synth needs at least two frames".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let cfg = SynthConfig { frames, seed, ..SynthConfig::default() };
    let s = synthesize(&cfg);
    write_with(&out.join(PROBLEM_FILE), |w| s.problem.write(w))?;
    write_with(&out.join(TRUTH_FILE), |w| s.truth_problem().write(w))?;
    let p = out.join(WEIGHTS_FILE);
    let json = serde_json::to_string_pretty(&cfg.weights()).map_err(|e| CliError::io(&p, e))?;
    fs::write(&p, json + "\n").map_err(|e| CliError::io(&p, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub report: SolveReport,
    pub ate_m: Option<f64>,
    pub median_rot_deg: Option<f64>,
}

/// Solves `problem`, writes the refined trajectory as TUM and returns the
/// report, with error metrics when a truth problem is given.
pub fn solve_file(problem: &Path, weights: Option<&Path>, truth: Option<&Path>, out_tum: &Path) -> Result<SolveSummary, CliError> {
    let p = read_problem(problem)?;
    let w = match weights {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ResidualWeights::default(),
    };
    let (out, report) = solve(&p, &w, &SolveOptions::default()).map_err(|e| CliError::Config(e.to_string()))?;
    write_with(out_tum, |f| out.write_tum(f))?;
    let (ate_m, median_rot_deg) = match truth {
        Some(path) => {
            let t = read_problem(path)?;
            if t.frames.len() != out.frames.len() {
                return Err(CliError::Data("truth and problem have different frame counts".into()));
            }
            (Some(ate_rmse(&out.frames, &t.frames)), Some(median(&rotation_errors_deg(&out.frames, &t.frames))))
        }
        None => (None, None),
    };
    Ok(SolveSummary { report, ate_m, median_rot_deg })
}
