//! Pipeline configuration: defaults, an optional TOML file, then flags.

use std::fs;
use std::path::Path;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use priorloc_core::matching::MatchConfig;
use priorloc_core::pnp::RansacConfig;
use priorloc_core::retrieval::RetrievalConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    /// Apply the sensor-prior filter before ranking.
    pub use_prior: bool,
    pub matching: MatchConfig,
    pub pnp: RansacConfig,
    /// Worker threads; 0 picks the available parallelism.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            use_prior: true,
            matching: MatchConfig::day(),
            pnp: RansacConfig::default(),
            threads: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.retrieval.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.matching.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pnp.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Defaults, then the optional file, then flags.
    pub fn resolve(file: Option<&Path>, flags: &PipelineFlags) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let parsed: FileConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            parsed.apply(&mut cfg);
        }
        flags.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    retrieval: RetrievalSection,
    #[serde(default)]
    matching: MatchingSection,
    #[serde(default)]
    pnp: PnpSection,
    threads: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrievalSection {
    tau_t: Option<f64>,
    tau_o: Option<f64>,
    k: Option<usize>,
    prior: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchingSection {
    temperature: Option<f64>,
    theta: Option<f64>,
    window: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PnpSection {
    inlier_px: Option<f64>,
    max_iters: Option<usize>,
    confidence: Option<f64>,
    tau_eps: Option<f64>,
    gravity_gate: Option<bool>,
    seed: Option<u64>,
}

fn set<T: Copy>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

impl FileConfig {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let r = &self.retrieval;
        set(&mut cfg.retrieval.tau_t, r.tau_t);
        set(&mut cfg.retrieval.tau_o, r.tau_o);
        set(&mut cfg.retrieval.k, r.k);
        set(&mut cfg.use_prior, r.prior);
        let m = &self.matching;
        set(&mut cfg.matching.temperature, m.temperature);
        set(&mut cfg.matching.theta, m.theta);
        set(&mut cfg.matching.window, m.window);
        let p = &self.pnp;
        set(&mut cfg.pnp.inlier_px, p.inlier_px);
        set(&mut cfg.pnp.max_iters, p.max_iters);
        set(&mut cfg.pnp.confidence, p.confidence);
        set(&mut cfg.pnp.tau_eps, p.tau_eps);
        set(&mut cfg.pnp.gravity_gate, p.gravity_gate);
        set(&mut cfg.pnp.seed, p.seed);
        set(&mut cfg.threads, self.threads);
    }
}

/// Flags shared by `localize` and `bench`.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    #[arg(long = "retrieval.tau-t", value_name = "M")]
    pub tau_t: Option<f64>,
    #[arg(long = "retrieval.tau-o", value_name = "DEG")]
    pub tau_o: Option<f64>,
    #[arg(long = "retrieval.k")]
    pub k: Option<usize>,
    #[arg(long = "retrieval.prior", value_enum)]
    pub prior: Option<Switch>,
    #[arg(long = "match.temperature")]
    pub temperature: Option<f64>,
    #[arg(long = "match.theta")]
    pub theta: Option<f64>,
    #[arg(long = "match.window")]
    pub window: Option<usize>,
    #[arg(long = "pnp.inlier-px", value_name = "PX")]
    pub inlier_px: Option<f64>,
    #[arg(long = "pnp.max-iters")]
    pub max_iters: Option<usize>,
    #[arg(long = "pnp.confidence")]
    pub confidence: Option<f64>,
    #[arg(long = "pnp.tau-eps", value_name = "DEG")]
    pub tau_eps: Option<f64>,
    #[arg(long = "pnp.gravity-gate", value_enum)]
    pub gravity_gate: Option<Switch>,
    #[arg(long = "pnp.seed")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl PipelineFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.retrieval.tau_t, self.tau_t);
        set(&mut cfg.retrieval.tau_o, self.tau_o);
        set(&mut cfg.retrieval.k, self.k);
        set(&mut cfg.use_prior, self.prior.map(Switch::is_on));
        set(&mut cfg.matching.temperature, self.temperature);
        set(&mut cfg.matching.theta, self.theta);
        set(&mut cfg.matching.window, self.window);
        set(&mut cfg.pnp.inlier_px, self.inlier_px);
        set(&mut cfg.pnp.max_iters, self.max_iters);
        set(&mut cfg.pnp.confidence, self.confidence);
        set(&mut cfg.pnp.tau_eps, self.tau_eps);
        set(&mut cfg.pnp.gravity_gate, self.gravity_gate.map(Switch::is_on));
        set(&mut cfg.pnp.seed, self.seed);
        set(&mut cfg.threads, self.threads);
    }
}
