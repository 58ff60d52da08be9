//! Localization recall at pose-error thresholds, retrieval metrics and a
//! recall-versus-threshold curve.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use priorloc_core::geom::pose_error;
use priorloc_core::retrieval::{retrieval_metrics, CorrectnessRule, DescriptorIndex, RetrievalTable};

use crate::dataset::TruthRow;
use crate::pipeline::{QueryResult, Status};
use crate::CliError;

/// Retrieval metrics are reported at these cutoffs.
pub const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];
const CURVE_STEPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    /// `(meters, degrees)`, strictly increasing in both.
    pub bins: Vec<(f64, f64)>,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self { bins: vec![(0.25, 2.0), (0.5, 5.0), (1.0, 10.0)] }
    }
}

impl EvalThresholds {
    pub fn new(bins: Vec<(f64, f64)>) -> Result<Self, CliError> {
        let t = Self { bins };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.bins.is_empty() {
            return Err(CliError::Config("at least one threshold bin is required".into()));
        }
        if self.bins.iter().any(|(m, d)| !(m.is_finite() && d.is_finite() && *m > 0.0 && *d > 0.0)) {
            return Err(CliError::Config("thresholds must be positive and finite".into()));
        }
        if self.bins.windows(2).any(|w| !(w[1].0 > w[0].0 && w[1].1 > w[0].1)) {
            return Err(CliError::Config("threshold bins must increase strictly in meters and degrees".into()));
        }
        Ok(())
    }

    /// Parses `0.25:2,0.5:5,1:10`.
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("bad thresholds {s:?}, expected m:deg,m:deg,..."));
        let bins = s
            .split(',')
            .map(|b| {
                let (m, d) = b.trim().split_once(':').ok_or_else(bad)?;
                Ok((m.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Self::new(bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub meters: f64,
    pub degrees: f64,
    /// Percent of all queries, failures counted as misses.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: usize,
    pub localized: usize,
    pub recall: Vec<RecallRow>,
    /// Threshold scale `s` applied to the last bin, and recall at it.
    pub curve: Vec<RecallRow>,
    pub median_error: Option<(f64, f64)>,
    pub retrieval: Option<RetrievalTable>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn recall_at(errors: &[Option<(f64, f64)>], m: f64, d: f64) -> f64 {
    let hits = errors.iter().filter(|e| e.is_some_and(|(et, er)| et <= m && er <= d)).count();
    100.0 * hits as f64 / errors.len() as f64
}

/// Scores `results` against `truth`. Every result id needs a ground-truth
/// row. With an index, retrieval precision and recall are reported too.
pub fn evaluate(
    results: &[QueryResult],
    truth: &[TruthRow],
    index: Option<&DescriptorIndex>,
    thresholds: &EvalThresholds,
) -> Result<EvalReport, CliError> {
    thresholds.validate()?;
    let gt: HashMap<u32, &TruthRow> = truth.iter().map(|t| (t.query_id, t)).collect();
    let mut missing: Vec<u32> = results.iter().map(|r| r.query_id).filter(|id| !gt.contains_key(id)).collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(CliError::Data(format!("no ground truth for queries {missing:?}")));
    }

    let errors: Vec<Option<(f64, f64)>> = results
        .iter()
        .map(|r| match (r.status, r.pose()) {
            (Status::Ok, Some(p)) => Some(pose_error(&p, &gt[&r.query_id].pose())),
            _ => None,
        })
        .collect();
    let localized = errors.iter().filter(|e| e.is_some()).count();
    let (recall, curve) = if results.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let recall = thresholds.bins.iter().map(|&(m, d)| RecallRow { meters: m, degrees: d, recall: recall_at(&errors, m, d) }).collect();
        let (lm, ld) = *thresholds.bins.last().expect("validated");
        let curve = (1..=CURVE_STEPS)
            .map(|i| {
                let s = i as f64 / CURVE_STEPS as f64;
                RecallRow { meters: s * lm, degrees: s * ld, recall: recall_at(&errors, s * lm, s * ld) }
            })
            .collect();
        (recall, curve)
    };
    let median_error = if localized == 0 {
        None
    } else {
        let mut t: Vec<f64> = errors.iter().flatten().map(|e| e.0).collect();
        let mut r: Vec<f64> = errors.iter().flatten().map(|e| e.1).collect();
        Some((median(&mut t), median(&mut r)))
    };

    let retrieval = match index {
        Some(index) if !results.is_empty() => {
            let rule = CorrectnessRule::default();
            let labels = results
                .iter()
                .map(|r| Ok(rule.label(index, &r.retrieved_ids()?, &gt[&r.query_id].pose())))
                .collect::<Result<Vec<_>, CliError>>()?;
            Some(retrieval_metrics(&labels, &RETRIEVAL_KS))
        }
        _ => None,
    };
    Ok(EvalReport { queries: results.len(), localized, recall, curve, median_error, retrieval })
}

impl EvalReport {
    pub fn recall_csv(&self) -> String {
        let mut s = String::from("meters,degrees,recall\n");
        for r in &self.recall {
            s.push_str(&format!("{},{},{:.2}\n", r.meters, r.degrees, r.recall));
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("meters,degrees,recall\n");
        for r in &self.curve {
            s.push_str(&format!("{:.4},{:.4},{:.2}\n", r.meters, r.degrees, r.recall));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("queries: {}  localized: {}\n", self.queries, self.localized);
        if self.queries == 0 {
            s.push_str("no queries to evaluate\n");
            return s;
        }
        let head: Vec<String> = self.recall.iter().map(|r| format!("({}m,{}deg)", r.meters, r.degrees)).collect();
        let vals: Vec<String> = self.recall.iter().map(|r| format!("{:.1}", r.recall)).collect();
        s.push_str(&format!("recall     {}\n", head.join(" / ")));
        s.push_str(&format!("           {}\n", vals.join(" / ")));
        if let Some((t, r)) = self.median_error {
            s.push_str(&format!("median error of localized queries: {t:.3} m, {r:.3} deg\n"));
        }
        if let Some(t) = &self.retrieval {
            s.push('\n');
            s.push_str(&t.to_text("retrieval"));
        }
        s
    }
}
