//! Four-window ADE evaluation of online adaptation.
//!
//! At instant `t` with adaptation step `τ` and horizon `T_f`:
//!
//! | metric | anchor  | steps |
//! |--------|---------|-------|
//! | ADE1   | `t − τ` | first `τ` |
//! | ADE2   | `t`     | first `τ` |
//! | ADE3   | `t − τ` | all `T_f` |
//! | ADE4   | `t`     | all `T_f` |
//!
//! Each is computed for the frozen offline model (baseline) and the adapted
//! model, and the improvement is `100 · (baseline − adapted) / baseline`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::ScenarioTag;
use crate::nn::LayerId;
use crate::numkit::Mat;

/// Improvements are left undefined for baselines at or below this value.
pub const MIN_BASELINE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ade: length mismatch {pred} vs {truth} (need equal and >= 1)")]
    Length { pred: usize, truth: usize },
    #[error("report at t={t}: need {needed} steps of predictions and ground truth, got {got}")]
    InsufficientSpan { t: usize, needed: usize, got: usize },
    #[error("nothing to aggregate")]
    Empty,
}

/// Mean Euclidean distance between matching rows of two `K × 2` sequences.
pub fn ade(pred: &Mat, truth: &Mat) -> Result<f64, MetricError> {
    if pred.rows() != truth.rows() || pred.rows() == 0 || pred.cols() < 2 || truth.cols() < 2 {
        return Err(MetricError::Length {
            pred: pred.rows(),
            truth: truth.rows(),
        });
    }
    let sum: f64 = (0..pred.rows())
        .map(|k| (pred[(k, 0)] - truth[(k, 0)]).hypot(pred[(k, 1)] - truth[(k, 1)]))
        .sum();
    Ok(sum / pred.rows() as f64)
}

fn ade_prefix(pred: &Mat, truth: &Mat, steps: usize) -> f64 {
    let sum: f64 = (0..steps)
        .map(|k| (pred[(k, 0)] - truth[(k, 0)]).hypot(pred[(k, 1)] - truth[(k, 1)]))
        .sum();
    sum / steps as f64
}

pub fn improvement_pct(baseline: f64, adapted: f64) -> Option<f64> {
    (baseline > MIN_BASELINE).then(|| 100.0 * (baseline - adapted) / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdePair {
    pub baseline: f64,
    pub adapted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdeReport {
    pub t: usize,
    pub ade: [AdePair; 4],
    pub improvement: [Option<f64>; 4],
}

/// Predictions and ground truth at the two anchors of one report, all
/// `≥ T_f × 2` in a common coordinate frame.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub baseline_prev: &'a Mat,
    pub adapted_prev: &'a Mat,
    pub truth_prev: &'a Mat,
    pub baseline_now: &'a Mat,
    pub adapted_now: &'a Mat,
    pub truth_now: &'a Mat,
}

pub fn report_at(
    t: usize,
    inputs: &ReportInputs<'_>,
    tau: usize,
    horizon: usize,
) -> Result<AdeReport, MetricError> {
    let shortest = [
        inputs.baseline_prev,
        inputs.adapted_prev,
        inputs.truth_prev,
        inputs.baseline_now,
        inputs.adapted_now,
        inputs.truth_now,
    ]
    .iter()
    .map(|m| m.rows())
    .min()
    .unwrap_or(0);
    if horizon == 0 || tau == 0 || tau > horizon || shortest < horizon {
        return Err(MetricError::InsufficientSpan {
            t,
            needed: horizon.max(tau),
            got: shortest,
        });
    }
    let pair = |base: &Mat, adapted: &Mat, truth: &Mat, steps: usize| AdePair {
        baseline: ade_prefix(base, truth, steps),
        adapted: ade_prefix(adapted, truth, steps),
    };
    let ade = [
        pair(inputs.baseline_prev, inputs.adapted_prev, inputs.truth_prev, tau),
        pair(inputs.baseline_now, inputs.adapted_now, inputs.truth_now, tau),
        pair(inputs.baseline_prev, inputs.adapted_prev, inputs.truth_prev, horizon),
        pair(inputs.baseline_now, inputs.adapted_now, inputs.truth_now, horizon),
    ];
    let improvement = ade.map(|p| improvement_pct(p.baseline, p.adapted));
    Ok(AdeReport { t, ade, improvement })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub scenario: ScenarioTag,
    pub layer: LayerId,
    pub tau: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub baseline_mean: f64,
    pub adapted_mean: f64,
    /// Ratio of means: `100 · (mean baseline − mean adapted) / mean baseline`.
    pub improvement_pct: Option<f64>,
    /// Plain mean of the per-instant improvements that are defined.
    pub mean_instant_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: GroupKey,
    pub n: usize,
    pub metrics: [MetricSummary; 4],
}

/// Sum after sorting, so the result does not depend on input order.
fn stable_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn aggregate(reports: &[(GroupKey, AdeReport)]) -> Result<Vec<SummaryRow>, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut groups: BTreeMap<GroupKey, Vec<&AdeReport>> = BTreeMap::new();
    for (k, r) in reports {
        groups.entry(*k).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(key, rs)| {
            let metrics = std::array::from_fn(|m| {
                let baseline_mean =
                    stable_mean(rs.iter().map(|r| r.ade[m].baseline).collect()).unwrap_or(0.0);
                let adapted_mean =
                    stable_mean(rs.iter().map(|r| r.ade[m].adapted).collect()).unwrap_or(0.0);
                MetricSummary {
                    baseline_mean,
                    adapted_mean,
                    improvement_pct: improvement_pct(baseline_mean, adapted_mean),
                    mean_instant_improvement: stable_mean(
                        rs.iter().filter_map(|r| r.improvement[m]).collect(),
                    ),
                }
            });
            SummaryRow {
                key,
                n: rs.len(),
                metrics,
            }
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct LongRow<'a> {
    scenario: &'a str,
    layer: &'a str,
    tau: usize,
    metric: String,
    baseline_mean: f64,
    adapted_mean: f64,
    improvement_pct: Option<f64>,
    n: usize,
}

/// One CSV row per (group, metric), after `# `-prefixed comment lines.
pub fn write_summary_csv(
    path: &Path,
    comments: &[String],
    rows: &[SummaryRow],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        for (m, s) in row.metrics.iter().enumerate() {
            w.serialize(LongRow {
                scenario: row.key.scenario.name(),
                layer: row.key.layer.name(),
                tau: row.key.tau,
                metric: format!("ade{}", m + 1),
                baseline_mean: s.baseline_mean,
                adapted_mean: s.adapted_mean,
                improvement_pct: s.improvement_pct,
                n: row.n,
            })
            .map_err(std::io::Error::other)?;
        }
    }
    w.flush()
}
