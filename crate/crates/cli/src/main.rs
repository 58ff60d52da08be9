use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use priorloc::config::{PipelineConfig, PipelineFlags};
use priorloc::dataset::{self, Dataset};
use priorloc::eval::{evaluate, EvalThresholds};
use priorloc::pipeline::{self, Status};
use priorloc::scene::{generate_scene, SceneSpec};
use priorloc::{traj, CliError};
use priorloc_core::retrieval::DescriptorIndex;
use priorloc_core::sensors::SensorNoiseModel;

#[derive(Parser)]
#[command(name = "priorloc", version, about = "Sensor-prior visual localization on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Localize every query of a dataset.
    Localize(LocalizeArgs),
    /// Score a results file against ground truth.
    Eval(EvalArgs),
    /// Time the pipeline stages over repeated runs.
    Bench(BenchArgs),
    /// Trajectory refinement on problem files.
    #[command(subcommand)]
    Gtopt(GtoptCommand),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML scene spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    n_refs: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long)]
    extent: Option<f64>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    #[arg(long)]
    corruption: Option<f64>,
    /// Disable all sensor noise.
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    gps_sigma: Option<f64>,
    #[arg(long)]
    compass_sigma: Option<f64>,
    #[arg(long)]
    gravity_sigma: Option<f64>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    groundtruth: PathBuf,
    /// Dataset index for retrieval metrics.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Threshold bins as `m:deg,m:deg,...`.
    #[arg(long, default_value = "0.25:2,0.5:5,1:10")]
    thresholds: String,
    /// Directory for the CSV and text tables; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Subcommand)]
enum GtoptCommand {
    /// Write a synthetic problem, its truth and weights.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Refine a problem and write the trajectory in TUM format.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn scene_spec(a: &GenArgs) -> Result<SceneSpec, CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SceneSpec::default(),
    };
    if a.noiseless {
        spec.noise = SensorNoiseModel { seed: spec.noise.seed, ..SensorNoiseModel::noiseless() };
    }
    macro_rules! over {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    over!(spec.seed, a.seed);
    over!(spec.n_points, a.n_points);
    over!(spec.n_refs, a.n_refs);
    over!(spec.n_queries, a.n_queries);
    over!(spec.extent, a.extent);
    over!(spec.outlier_fraction, a.outlier_fraction);
    over!(spec.descriptor_corruption, a.corruption);
    over!(spec.noise.gps_sigma_xy, a.gps_sigma);
    over!(spec.noise.compass_sigma, a.compass_sigma);
    over!(spec.noise.gravity_sigma, a.gravity_sigma);
    spec.validate()?;
    Ok(spec)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Gen(a) => {
            let spec = scene_spec(&a)?;
            let stats = generate_scene(&spec, &a.out)?;
            println!(
                "{} refs, {} queries, {} mapped points (mean track {:.1}), {:.1} features per query",
                stats.refs, stats.queries, stats.points_with_tracks, stats.mean_track_len, stats.mean_query_features
            );
        }
        Command::Localize(a) => {
            let cfg = PipelineConfig::resolve(a.config.as_deref(), &a.flags)?;
            let ds = Dataset::load(&a.data)?;
            let (results, timings) = pipeline::localize_all(&ds, &cfg)?;
            pipeline::write_results(&a.out, &results, &timings)?;
            let ok = results.iter().filter(|r| r.status == Status::Ok).count();
            println!("localized {ok} of {} queries", results.len());
            print!("{}", pipeline::timing_summary_csv(&pipeline::summarize_timings(&timings)));
        }
        Command::Eval(a) => {
            let thresholds = EvalThresholds::parse(&a.thresholds)?;
            let results = pipeline::read_results(&a.results)?;
            let truth = dataset::read_truth(&a.groundtruth)?;
            let index = match &a.index {
                Some(p) => {
                    let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
                    Some(DescriptorIndex::read(std::io::BufReader::new(f)).map_err(|e| CliError::io(p, e))?)
                }
                None => None,
            };
            let report = evaluate(&results, &truth, index.as_ref(), &thresholds)?;
            let timing_path = a.results.with_file_name(pipeline::TIMING_FILE);
            let timing = if timing_path.exists() {
                Some(pipeline::summarize_timings(&pipeline::read_timings(&timing_path)?))
            } else {
                None
            };
            let mut text = report.to_text();
            if let Some(t) = &timing {
                text.push('\n');
                text.push_str(&pipeline::timing_summary_csv(t));
            }
            match &a.out {
                Some(out) => {
                    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
                    write_file(&out.join("recall.csv"), &report.recall_csv())?;
                    write_file(&out.join("recall_curve.csv"), &report.curve_csv())?;
                    if let Some(r) = &report.retrieval {
                        write_file(&out.join("retrieval.csv"), &r.to_csv("retrieval"))?;
                    }
                    if let Some(t) = &timing {
                        write_file(&out.join("timing_summary.csv"), &pipeline::timing_summary_csv(t))?;
                    }
                    write_file(&out.join("eval.txt"), &text)?;
                    print!("{text}");
                }
                None => print!("{text}"),
            }
        }
        Command::Bench(a) => {
            let cfg = PipelineConfig::resolve(a.config.as_deref(), &a.flags)?;
            let ds = Dataset::load(&a.data)?;
            let summary = pipeline::bench(&ds, &cfg, a.runs)?;
            print!("{}", pipeline::timing_summary_csv(&summary));
        }
        Command::Gtopt(GtoptCommand::Synth { out, frames, seed }) => {
            traj::write_synthetic(&out, frames, seed)?;
            println!("wrote {}", out.display());
        }
        Command::Gtopt(GtoptCommand::Solve { problem, weights, truth, out }) => {
            let s = traj::solve_file(&problem, weights.as_deref(), truth.as_deref(), &out)?;
            println!(
                "{:?} after {} iterations, cost {:.6e} -> {:.6e}",
                s.report.termination, s.report.iterations, s.report.initial_cost, s.report.final_cost
            );
            if let (Some(ate), Some(rot)) = (s.ate_m, s.median_rot_deg) {
                println!("ATE {ate:.4} m, median rotation error {rot:.4} deg");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
