//! Report emission: outcome documents, trace and deviation tables, batch
//! summaries with aggregate statistics, and the comparison tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use iegds_core::dispatch::{DispatchOutcome, OutcomeStatus};
use serde::{Deserialize, Serialize};

pub const OUTCOME_FORMAT: &str = "iegds-outcome-v1";
pub const SUMMARY_FORMAT: &str = "iegds-summary-v1";
pub const COMPARE_FORMAT: &str = "iegds-compare-v1";

pub fn status_str(status: OutcomeStatus) -> &'static str {
    match status {
        OutcomeStatus::ExactGne => "exact_gne",
        OutcomeStatus::EpsGne => "eps_gne",
        OutcomeStatus::MaxIterNoFeasible => "max_iter_no_feasible",
    }
}

/// Mean absolute and signed deviation over the well-defined entries, plus the
/// count of undefined references.
pub fn deviation_stats(outcome: &DispatchOutcome) -> (f64, f64, usize) {
    let mut abs_sum = 0.0;
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut undefined = 0usize;
    for d in &outcome.deviations {
        match d.delta {
            Some(v) => {
                abs_sum += v.abs();
                sum += v;
                n += 1;
            }
            None => undefined += 1,
        }
    }
    if n == 0 {
        (0.0, 0.0, undefined)
    } else {
        (abs_sum / n as f64, sum / n as f64, undefined)
    }
}

/// The full solve report written as outcome.json.
#[derive(Debug, Serialize)]
pub struct OutcomeDocument<'a> {
    pub format: &'static str,
    pub model: String,
    pub network: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub status: &'static str,
    pub epsilon: Option<f64>,
    pub eps_pct_of_mean_cost: Option<f64>,
    pub rho_final: f64,
    pub violation_final: f64,
    pub j_psi_final: f64,
    pub potential_first: Option<f64>,
    pub potential_final: f64,
    pub mean_abs_cost: f64,
    pub outer_iterations: usize,
    pub mean_abs_deviation: f64,
    pub mean_deviation: f64,
    pub undefined_deviations: usize,
    pub wall_time_s: f64,
    pub outcome: &'a DispatchOutcome,
}

impl<'a> OutcomeDocument<'a> {
    pub fn new(
        model: String,
        network: String,
        seed: Option<u64>,
        outcome: &'a DispatchOutcome,
        wall_time_s: f64,
    ) -> Self {
        let (mean_abs_deviation, mean_deviation, undefined) = deviation_stats(outcome);
        OutcomeDocument {
            format: OUTCOME_FORMAT,
            model,
            network,
            seed,
            status: status_str(outcome.status),
            epsilon: outcome.epsilon,
            eps_pct_of_mean_cost: eps_pct(outcome),
            rho_final: outcome.rho_final,
            violation_final: outcome.violation_final,
            j_psi_final: outcome.j_psi_final,
            potential_first: outcome.potential_first,
            potential_final: outcome.potential_final,
            mean_abs_cost: outcome.mean_abs_cost,
            outer_iterations: outcome.outer_iterations,
            mean_abs_deviation,
            mean_deviation,
            undefined_deviations: undefined,
            wall_time_s,
            outcome,
        }
    }
}

/// Epsilon as a percentage of the mean absolute cost at the final iterate.
pub fn eps_pct(outcome: &DispatchOutcome) -> Option<f64> {
    outcome.epsilon.map(|e| {
        if outcome.mean_abs_cost > 0.0 {
            100.0 * e / outcome.mean_abs_cost
        } else {
            0.0
        }
    })
}

pub fn write_outcome_files(dir: &Path, doc: &OutcomeDocument) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(doc)?;
    std::fs::write(dir.join("outcome.json"), json)?;

    // trace.csv: one row per outer iteration.
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    w.write_record(["ell", "rho", "violation", "potential"])?;
    for rec in &doc.outcome.trace {
        w.write_record([
            rec.ell.to_string(),
            format_float(rec.rho),
            format_float(rec.violation),
            format_float(rec.potential),
        ])?;
    }
    w.flush()?;

    // deviations.csv: one row per directed pipe and step.
    let mut w = csv::Writer::from_path(dir.join("deviations.csv"))?;
    w.write_record(["pipe", "step", "status", "delta", "abs_flow"])?;
    for d in &doc.outcome.deviations {
        let (status, delta) = match d.delta {
            Some(v) => ("ok", format_float(v)),
            None => ("undefined_reference", String::new()),
        };
        w.write_record([
            format!("{}-{}", d.from, d.to),
            d.step.to_string(),
            status.to_string(),
            delta,
            format_float(d.abs_flow),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn format_float(v: f64) -> String {
    // Shortest round-trip formatting keeps the tables deterministic.
    format!("{v}")
}

/// One summary row per (case, model) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub model: String,
    pub status: String,
    pub epsilon: Option<f64>,
    pub mean_abs_cost: f64,
    pub eps_pct_of_mean_cost: Option<f64>,
    pub rho_final: f64,
    pub outer_iterations: usize,
    pub mean_abs_deviation: f64,
    pub mean_deviation: f64,
    pub undefined_deviations: usize,
    pub wall_time_s: f64,
    /// Present when the run aborted (solver failure); such rows carry no
    /// metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SummaryRow {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && (self.status == "exact_gne" || self.status == "eps_gne")
    }
}

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "seed",
    "model",
    "status",
    "epsilon",
    "mean_abs_cost",
    "eps_pct_of_mean_cost",
    "rho_final",
    "outer_iterations",
    "mean_abs_deviation",
    "mean_deviation",
    "undefined_deviations",
    "wall_time_s",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSummary {
    pub format: String,
    pub network: String,
    pub cases: Vec<SummaryRow>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub total: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub by_model: BTreeMap<String, ModelAggregate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub total: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Five-number summaries over the successful cases.
    pub quantiles: BTreeMap<String, FiveNumber>,
}

/// Five-number summary (box-plot data).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<FiveNumber> {
        if values.is_empty() {
            return None;
        }
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| -> f64 {
            let idx = p * (v.len() - 1) as f64;
            let lo = idx.floor() as usize;
            let hi = idx.ceil() as usize;
            let w = idx - lo as f64;
            v[lo] * (1.0 - w) + v[hi] * w
        };
        Some(FiveNumber { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: *v.last().unwrap() })
    }
}

/// Metrics included in aggregates and comparisons.
pub const METRICS: [&str; 4] = ["eps_pct_of_mean_cost", "rho_final", "mean_abs_deviation", "wall_time_s"];

fn metric_of(row: &SummaryRow, metric: &str) -> Option<f64> {
    match metric {
        "eps_pct_of_mean_cost" => row.eps_pct_of_mean_cost,
        "rho_final" => Some(row.rho_final),
        "mean_abs_deviation" => Some(row.mean_abs_deviation),
        "wall_time_s" => Some(row.wall_time_s),
        _ => None,
    }
}

pub fn aggregate(cases: &[SummaryRow]) -> Aggregate {
    let total = cases.len();
    let successes = cases.iter().filter(|r| r.succeeded()).count();
    let mut by_model: BTreeMap<String, ModelAggregate> = BTreeMap::new();
    let models: std::collections::BTreeSet<String> =
        cases.iter().map(|r| r.model.clone()).collect();
    for model in models {
        let rows: Vec<&SummaryRow> = cases.iter().filter(|r| r.model == model).collect();
        let ok: Vec<&SummaryRow> = rows.iter().copied().filter(|r| r.succeeded()).collect();
        let mut quantiles = BTreeMap::new();
        for metric in METRICS {
            let values: Vec<f64> = ok.iter().filter_map(|r| metric_of(r, metric)).collect();
            if let Some(f) = FiveNumber::of(&values) {
                quantiles.insert(metric.to_string(), f);
            }
        }
        by_model.insert(
            model,
            ModelAggregate {
                total: rows.len(),
                successes: ok.len(),
                success_rate: if rows.is_empty() { 0.0 } else { ok.len() as f64 / rows.len() as f64 },
                quantiles,
            },
        );
    }
    Aggregate {
        total,
        successes,
        success_rate: if total == 0 { 0.0 } else { successes as f64 / total as f64 },
        by_model,
    }
}

pub fn write_summary(dir: &Path, network: &str, mut cases: Vec<SummaryRow>) -> Result<BatchSummary> {
    cases.sort_by(|a, b| (a.seed, &a.model).cmp(&(b.seed, &b.model)));
    let summary = BatchSummary {
        format: SUMMARY_FORMAT.into(),
        network: network.to_string(),
        aggregate: aggregate(&cases),
        cases,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(SUMMARY_COLUMNS)?;
    for row in &summary.cases {
        w.write_record([
            row.seed.to_string(),
            row.model.clone(),
            row.status.clone(),
            row.epsilon.map(format_float).unwrap_or_default(),
            format_float(row.mean_abs_cost),
            row.eps_pct_of_mean_cost.map(format_float).unwrap_or_default(),
            format_float(row.rho_final),
            row.outer_iterations.to_string(),
            format_float(row.mean_abs_deviation),
            format_float(row.mean_deviation),
            row.undefined_deviations.to_string(),
            format_float(row.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(summary)
}

/// Comparison across summaries: per model, five-number summaries of each
/// metric over the union of successful cases, plus success rates.
#[derive(Debug, Serialize)]
pub struct Comparison {
    pub format: &'static str,
    pub case_seeds: Vec<u64>,
    pub models: BTreeMap<String, ModelAggregate>,
}

pub fn compare(summaries: &[BatchSummary]) -> Result<Comparison> {
    let mut seed_sets: Vec<Vec<u64>> = Vec::new();
    for s in summaries {
        let mut seeds: Vec<u64> = s.cases.iter().map(|c| c.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seed_sets.push(seeds);
    }
    for w in seed_sets.windows(2) {
        if w[0] != w[1] {
            anyhow::bail!("summaries cover different case sets and cannot be compared");
        }
    }
    // One row per (seed, model): re-supplied summaries must not double-count.
    let mut seen = std::collections::BTreeSet::new();
    let mut all_rows: Vec<SummaryRow> = Vec::new();
    for s in summaries {
        for row in &s.cases {
            if seen.insert((row.seed, row.model.clone())) {
                all_rows.push(row.clone());
            }
        }
    }
    let agg = aggregate(&all_rows);
    Ok(Comparison {
        format: COMPARE_FORMAT,
        case_seeds: seed_sets.into_iter().next().unwrap_or_default(),
        models: agg.by_model,
    })
}

pub fn write_comparison(out_csv: &Path, out_json: &Path, cmp: &Comparison) -> Result<()> {
    let mut w = csv::Writer::from_path(out_csv)
        .with_context(|| format!("cannot write {}", out_csv.display()))?;
    w.write_record(["model", "success_rate", "metric", "min", "q1", "median", "q3", "max"])?;
    for (model, agg) in &cmp.models {
        for metric in METRICS {
            if let Some(f) = agg.quantiles.get(metric) {
                w.write_record([
                    model.clone(),
                    format_float(agg.success_rate),
                    metric.to_string(),
                    format_float(f.min),
                    format_float(f.q1),
                    format_float(f.median),
                    format_float(f.q3),
                    format_float(f.max),
                ])?;
            }
        }
    }
    w.flush()?;
    std::fs::write(out_json, serde_json::to_string_pretty(cmp)?)?;
    Ok(())
}

pub fn print_comparison(cmp: &Comparison) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "{:<12} {:>8}  {:<24} {:>12} {:>12} {:>12}", "model", "success", "metric", "q1", "median", "q3")?;
    for (model, agg) in &cmp.models {
        for metric in METRICS {
            if let Some(f) = agg.quantiles.get(metric) {
                writeln!(
                    out,
                    "{:<12} {:>7.0}%  {:<24} {:>12.5} {:>12.5} {:>12.5}",
                    model,
                    100.0 * agg.success_rate,
                    metric,
                    f.q1,
                    f.median,
                    f.q3
                )?;
            }
        }
    }
    Ok(())
}
