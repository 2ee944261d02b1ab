//! Deterministic co-inference latency simulation and sweep reports.
//!
//! Simulation reuses the planner's latency kernel; jitter mode perturbs each
//! breakdown term independently with a seeded generator.

use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::BranchyModel;
use crate::planner::{self, EvalOptions, PartitionPlan, PlanError, PlanOutcome, PlanRequest, SegmentTimings};
use crate::predictor::PredictorSet;

/// Accuracy reported for a budget that cannot be met.
pub const INFEASIBLE_ACCURACY: f64 = -1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("plan does not fit the model")]
    PlanMismatch(#[source] PlanError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("writing {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("writing csv")]
    Csv(#[from] csv::Error),
}

/// Multiplies each latency term by `1 + u`, `u ~ U[-fraction, +fraction]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub fraction: f64,
    pub seed: u64,
}

impl Jitter {
    fn validate(&self) -> Result<(), SimError> {
        if (0.0..1.0).contains(&self.fraction) {
            Ok(())
        } else {
            Err(SimError::InvalidScenario(format!(
                "jitter fraction {} not in [0, 1)",
                self.fraction
            )))
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Latency of executing `plan`. Without jitter this is exactly the planner's
/// prediction.
pub fn simulate_plan(
    model: &BranchyModel,
    predictors: &PredictorSet,
    plan: &PartitionPlan,
    bandwidth_bps: f64,
    options: &EvalOptions,
    jitter: Option<Jitter>,
) -> Result<f64, SimError> {
    let evaluated = planner::evaluate(model, predictors, plan.exit, plan.partition, bandwidth_bps, options).map_err(
        |e| match e {
            PlanError::InvalidRequest(_) => SimError::Plan(e),
            other => SimError::PlanMismatch(other),
        },
    )?;
    match jitter {
        None => Ok(evaluated.predicted_latency_ms),
        Some(j) => {
            j.validate()?;
            if j.fraction == 0.0 {
                return Ok(evaluated.predicted_latency_ms);
            }
            let mut rng = j.rng();
            Ok(evaluated
                .breakdown
                .map(|t| t * (1.0 + rng.gen_range(-j.fraction..=j.fraction)))
                .total())
        }
    }
}

/// Edge-only offloading of a fixed workload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    pub server_compute_ms: f64,
    pub input_bytes: u64,
    pub bandwidth_bps: f64,
    pub jitter: Option<Jitter>,
}

/// Upload time of the input plus server compute.
pub fn simulate_edge_only(scenario: &ScenarioConfig) -> Result<f64, SimError> {
    if !(scenario.server_compute_ms > 0.0) || !(scenario.bandwidth_bps > 0.0) {
        return Err(SimError::InvalidScenario(
            "server compute and bandwidth must be positive".into(),
        ));
    }
    let transfer = planner::transfer_ms(scenario.input_bytes, scenario.bandwidth_bps);
    match scenario.jitter {
        None => Ok(transfer + scenario.server_compute_ms),
        Some(j) => {
            j.validate()?;
            let mut rng = j.rng();
            let mut perturb = |t: f64| t * (1.0 + rng.gen_range(-j.fraction..=j.fraction));
            Ok(perturb(transfer) + perturb(scenario.server_compute_ms))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Grid in kbit/s, fixed value is the budget in ms.
    Bandwidth,
    /// Grid in ms, fixed value is the bandwidth in kbit/s.
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub fixed: f64,
    pub options: EvalOptions,
}

impl SweepSpec {
    fn validate(&self) -> Result<(), SimError> {
        if self.grid.is_empty() {
            return Err(SimError::InvalidSweep("grid is empty".into()));
        }
        if self.grid.iter().any(|v| !(*v > 0.0)) || !(self.fixed > 0.0) {
            return Err(SimError::InvalidSweep("grid and fixed values must be positive".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::InvalidSweep("grid must be strictly increasing".into()));
        }
        Ok(())
    }

    fn bandwidth_and_budget(&self, value: f64) -> (f64, f64) {
        match self.axis {
            SweepAxis::Bandwidth => (value * 1000.0, self.fixed),
            SweepAxis::Budget => (self.fixed * 1000.0, value),
        }
    }
}

/// `steps` evenly spaced values from `from` to `to` inclusive.
pub fn linear_grid(from: f64, to: f64, steps: usize) -> Result<Vec<f64>, SimError> {
    match steps {
        0 => Err(SimError::InvalidSweep("steps must be >= 1".into())),
        1 => Ok(vec![from]),
        _ => {
            let step = (to - from) / (steps - 1) as f64;
            Ok((0..steps)
                .map(|i| if i == steps - 1 { to } else { from + step * i as f64 })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    /// `None` when infeasible.
    pub exit: Option<usize>,
    pub partition: Option<usize>,
    /// Selected latency, or the best achievable latency when infeasible.
    pub latency_ms: f64,
    pub accuracy: f64,
    pub feasible: bool,
}

impl SweepRow {
    fn from_outcome(axis_value: f64, outcome: &PlanOutcome) -> SweepRow {
        let plan = outcome.plan();
        let selected = outcome.selected();
        SweepRow {
            axis_value,
            exit: selected.map(|p| p.exit),
            partition: selected.map(|p| p.partition),
            latency_ms: plan.predicted_latency_ms,
            accuracy: selected.map_or(INFEASIBLE_ACCURACY, |p| p.accuracy),
            feasible: outcome.is_feasible(),
        }
    }
}

/// One plan per grid point, in grid order.
pub fn sweep(model: &BranchyModel, predictors: &PredictorSet, spec: &SweepSpec) -> Result<Vec<SweepRow>, SimError> {
    spec.validate()?;
    spec.grid
        .par_iter()
        .map(|&value| {
            let (bandwidth, budget) = spec.bandwidth_and_budget(value);
            let request = PlanRequest::new(model, predictors, bandwidth, budget, spec.options)?;
            Ok(SweepRow::from_outcome(value, &planner::plan(&request)))
        })
        .collect()
}

/// Runs [`sweep`] and writes the rows as CSV to `out`.
pub fn sweep_to_csv(
    model: &BranchyModel,
    predictors: &PredictorSet,
    spec: &SweepSpec,
    out: &Path,
) -> Result<Vec<SweepRow>, SimError> {
    let rows = sweep(model, predictors, spec)?;
    write_csv(out, &rows)?;
    Ok(rows)
}

/// Accuracy per strategy at one budget; [`INFEASIBLE_ACCURACY`] when unmet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub budget_ms: f64,
    pub device_only: f64,
    pub edge_only: f64,
    pub partition_only: f64,
    pub edgent: f64,
}

/// Device-only, edge-only, partition-only (largest exit) and the joint
/// search, side by side.
pub fn compare_methods(
    model: &BranchyModel,
    predictors: &PredictorSet,
    budgets_ms: &[f64],
    bandwidth_bps: f64,
    options: &EvalOptions,
) -> Result<Vec<CompareRow>, SimError> {
    if budgets_ms.is_empty() {
        return Err(SimError::InvalidSweep("no budgets".into()));
    }
    // validates bandwidth and every budget up front
    for &b in budgets_ms {
        PlanRequest::new(model, predictors, bandwidth_bps, b, *options)?;
    }
    let request = PlanRequest::new(model, predictors, bandwidth_bps, budgets_ms[0], *options)?;
    let exits = request.exit_timings();
    let link = request.link();

    let latency = |t: &SegmentTimings, p: usize| t.evaluate(p, &link).expect("in range").predicted_latency_ms;
    let best_exit = |budget: f64, pick: &dyn Fn(&SegmentTimings) -> f64| {
        exits
            .iter()
            .rev()
            .find(|t| pick(t) <= budget)
            .map_or(INFEASIBLE_ACCURACY, |t| t.accuracy())
    };
    let largest = exits.last().expect("at least one exit");

    Ok(budgets_ms
        .iter()
        .map(|&budget| CompareRow {
            budget_ms: budget,
            device_only: best_exit(budget, &|t| latency(t, 0)),
            edge_only: best_exit(budget, &|t| latency(t, t.len())),
            partition_only: if largest.best_partition(&link).predicted_latency_ms <= budget {
                largest.accuracy()
            } else {
                INFEASIBLE_ACCURACY
            },
            edgent: planner::search(&exits, &link, budget)
                .selected()
                .map_or(INFEASIBLE_ACCURACY, |p| p.accuracy),
        })
        .collect())
}

pub fn write_csv<T: Serialize>(out: &Path, rows: &[T]) -> Result<(), SimError> {
    let file = File::create(out).map_err(|source| SimError::Io {
        path: out.to_owned(),
        source,
    })?;
    write_csv_to(file, rows)
}

pub fn write_csv_to<T: Serialize, W: io::Write>(writer: W, rows: &[T]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|source| SimError::Io {
        path: PathBuf::from("<csv>"),
        source,
    })?;
    Ok(())
}

/// A gnuplot script plotting a sweep or comparison CSV.
pub fn gnuplot_script(csv_path: &Path, axis: Option<SweepAxis>) -> String {
    let csv = csv_path.display();
    let png = csv_path.with_extension("png");
    let png = png.display();
    let mut s = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,500\nset output '{png}'\n"
    );
    match axis {
        Some(axis) => {
            let xlabel = match axis {
                SweepAxis::Bandwidth => "bandwidth (kbps)",
                SweepAxis::Budget => "latency budget (ms)",
            };
            s.push_str(&format!(
                "set xlabel '{xlabel}'\nset ylabel 'index'\nset y2label 'latency (ms)'\nset y2tics\n\
                 plot '{csv}' using 1:2 with linespoints, '' using 1:3 with linespoints, \
                 '' using 1:4 axes x1y2 with lines\n"
            ));
        }
        None => {
            s.push_str(&format!(
                "set xlabel 'latency budget (ms)'\nset ylabel 'accuracy'\nset style data histograms\n\
                 plot '{csv}' using 2:xtic(1), '' using 3, '' using 4, '' using 5\n"
            ));
        }
    }
    s
}
