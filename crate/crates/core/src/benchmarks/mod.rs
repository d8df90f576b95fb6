//! Benchmark plants and the experiments run on them.

pub mod centroidal;
pub mod quadrotor;
pub mod twolink;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_loop::{
    run_closed_loop, summarize_window, DisturbanceScript, EstimatorKind, RunSummary, Scenario, TrajectoryLog,
};
use crate::filters::RiskConfig;
use crate::Result;

pub(crate) fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

/// `100 (baseline - candidate) / baseline`.
pub fn improvement_pct(baseline: f64, candidate: f64) -> f64 {
    if baseline == candidate {
        0.0
    } else {
        100.0 * (baseline - candidate) / baseline
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub ekf: RunSummary,
    pub rs_ekf: RunSummary,
    pub mse_improvement_pct: f64,
    pub cost_improvement_pct: f64,
}

impl Comparison {
    pub fn new(ekf: RunSummary, rs_ekf: RunSummary) -> Self {
        Self {
            ekf,
            rs_ekf,
            mse_improvement_pct: improvement_pct(ekf.mse, rs_ekf.mse),
            cost_improvement_pct: improvement_pct(ekf.avg_cost, rs_ekf.avg_cost),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub summary: Comparison,
    pub ekf: TrajectoryLog,
    pub rs_ekf: TrajectoryLog,
    pub reference: Vec<DVector<f64>>,
}

/// Runs both filters on the same noise realization (same seed) and summarizes
/// rows `window_from..` against `reference`.
pub fn compare_estimators(
    scenario: &Scenario,
    risk: &RiskConfig,
    script: &DisturbanceScript,
    steps: usize,
    seed: u64,
    reference: &[DVector<f64>],
    window_from: usize,
) -> Result<ComparisonReport> {
    let ekf = run_closed_loop(scenario, EstimatorKind::Ekf, risk, script, steps, seed)?;
    let rs_ekf = run_closed_loop(scenario, EstimatorKind::RsEkf, risk, script, steps, seed)?;
    let summary = Comparison::new(
        summarize_window(&ekf, reference, window_from)?,
        summarize_window(&rs_ekf, reference, window_from)?,
    );
    Ok(ComparisonReport {
        summary,
        ekf,
        rs_ekf,
        reference: reference.to_vec(),
    })
}
