use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::benchmarks::improvement_pct;
use crate::benchmarks::twolink::ArmSetup;
use crate::closed_loop::{
    fmt_f64, run_closed_loop, squared_errors, summarize_window, DisturbanceScript, EstimatorKind, RunSummary,
    Scenario,
};
use crate::filters::RiskConfig;
use crate::parallel::{map_indexed, Execution};
use crate::{Error, Result};

use super::config::{BenchmarkSetup, ExperimentConfig, Preset};

enum ScriptSource {
    Fixed(DisturbanceScript),
    /// A fresh random push per trial seed.
    Push(Box<ArmSetup>),
}

/// Everything shared by the trials of one study.
pub struct Study {
    pub config: ExperimentConfig,
    pub preset: Preset,
    pub scenario: Scenario,
    pub risk: RiskConfig,
    pub steps: usize,
    pub reference: Vec<DVector<f64>>,
    kinds: Vec<EstimatorKind>,
    script: ScriptSource,
    arm: Option<ArmSetup>,
}

/// Result of one estimator on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub kind: EstimatorKind,
    pub result: std::result::Result<(RunSummary, Vec<f64>), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub runs: Vec<RunOutcome>,
}

impl TrialOutcome {
    pub fn completed(&self) -> bool {
        self.runs.iter().all(|r| r.result.is_ok())
    }
}

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub status: TrialStatus,
    pub mse: Option<f64>,
    pub avg_cost: Option<f64>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Ok,
    Failed,
    /// This run succeeded but another estimator failed on the same trial.
    Excluded,
}

/// Pointwise 25th, 50th and 75th percentiles of the squared tracking error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PercentileCurves {
    pub t: Vec<f64>,
    pub p25: Vec<f64>,
    pub p50: Vec<f64>,
    pub p75: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorAggregate {
    pub estimator: EstimatorKind,
    pub failures: usize,
    pub risk_limit_failures: usize,
    pub mse_mean: Option<f64>,
    pub mse_median: Option<f64>,
    pub avg_cost_mean: Option<f64>,
    pub avg_cost_median: Option<f64>,
    pub curves: PercentileCurves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub preset: Preset,
    pub mu: f64,
    pub seed: u64,
    pub trials: usize,
    /// Trials on which every estimator finished; only these enter the aggregates.
    pub completed: usize,
    pub failed: usize,
    pub estimators: Vec<EstimatorAggregate>,
    /// From the mean MSEs (EKF baseline).
    pub mse_improvement_pct: Option<f64>,
    pub median_mse_improvement_pct: Option<f64>,
    pub cost_improvement_pct: Option<f64>,
    pub trial_table: Vec<TrialRecord>,
}

impl StudySummary {
    pub fn aggregate(&self, kind: EstimatorKind) -> Option<&EstimatorAggregate> {
        self.estimators.iter().find(|a| a.estimator == kind)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub config: ExperimentConfig,
    pub crate_version: String,
    pub parallel_feature: bool,
    pub execution: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub summary: StudySummary,
    pub wall_time_s: f64,
    /// Directory the files went to, if any.
    pub out_dir: Option<PathBuf>,
}

impl Study {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let config = config.clone().resolve()?;
        let preset = config.preset()?;
        let ddp = config.ddp;
        let setup = config.benchmark()?;
        let risk = RiskConfig::new(setup.mu())?;
        let (scenario, default_steps, reference, script, arm) = match setup {
            BenchmarkSetup::Quadrotor(s) => {
                let script = config.script.clone().unwrap_or_else(|| s.script());
                let scenario = s.scenario(ddp, &script)?;
                let reference = s.reference(ddp, &script)?;
                (scenario, s.steps(), reference, ScriptSource::Fixed(script), None)
            }
            BenchmarkSetup::Arm(s) => {
                let script = match &config.script {
                    Some(fixed) => ScriptSource::Fixed(fixed.clone()),
                    None => ScriptSource::Push(Box::new(s.clone())),
                };
                (s.scenario(ddp)?, s.steps(), s.reference(), script, Some(s))
            }
            BenchmarkSetup::Centroidal(s) => {
                let script = config.script.clone().unwrap_or_else(|| s.script());
                (s.scenario(ddp)?, s.steps(), s.reference(), ScriptSource::Fixed(script), None)
            }
        };
        let steps = match config.steps {
            Some(n) if n > default_steps => {
                return Err(Error::validation(
                    "steps",
                    format!("preset {preset} runs at most {default_steps} steps, got {n}"),
                ))
            }
            Some(n) => n,
            None => default_steps,
        };
        let mut reference = reference;
        reference.truncate(steps);
        let run_length = steps as f64 * scenario.dt();
        let script = match script {
            ScriptSource::Fixed(s) => {
                let s = s.truncated(run_length);
                s.validate(run_length)?;
                ScriptSource::Fixed(s)
            }
            push => push,
        };
        Ok(Self {
            kinds: config.estimator.kinds(),
            preset,
            scenario,
            risk,
            steps,
            reference,
            script,
            arm,
            config,
        })
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.config.seed.wrapping_add(trial as u64)
    }

    pub fn trial_script(&self, seed: u64) -> DisturbanceScript {
        match &self.script {
            ScriptSource::Fixed(s) => s.clone(),
            ScriptSource::Push(arm) => arm.script(seed).truncated(self.steps as f64 * self.scenario.dt()),
        }
    }

    /// First row of the scoring window.
    fn window_start(&self, script: &DisturbanceScript) -> usize {
        self.arm.as_ref().map_or(0, |a| a.window_start(script))
    }

    /// Runs one trial; writes trajectory CSVs to `traj_dir` if given.
    pub fn run_trial(&self, trial: usize, traj_dir: Option<&Path>) -> TrialOutcome {
        let seed = self.trial_seed(trial);
        let script = self.trial_script(seed);
        let from = self.window_start(&script);
        let runs = self
            .kinds
            .iter()
            .map(|&kind| {
                let result = run_closed_loop(&self.scenario, kind, &self.risk, &script, self.steps, seed)
                    .and_then(|log| {
                        if let Some(dir) = traj_dir {
                            let path = dir.join(trajectory_file(trial, kind));
                            log.write_csv(BufWriter::new(fs::File::create(path)?))?;
                        }
                        let summary = summarize_window(&log, &self.reference, from)?;
                        Ok((summary, squared_errors(&log, &self.reference)))
                    })
                    .map_err(|e| e.to_string());
                RunOutcome { kind, result }
            })
            .collect();
        TrialOutcome { trial, seed, runs }
    }

    pub fn execution(&self) -> Execution {
        Execution::from_jobs(self.config.jobs)
    }

    pub fn run(&self, out_dir: Option<&Path>) -> Result<StudyOutput> {
        let start = Instant::now();
        let traj_dir = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let t = dir.join("trajectories");
                if self.config.write_trajectories {
                    fs::create_dir_all(&t)?;
                    Some(t)
                } else {
                    None
                }
            }
            None => None,
        };
        let outcomes = map_indexed(self.config.trial_count(), self.execution(), |i| {
            self.run_trial(i, traj_dir.as_deref())
        });
        let summary = self.summarize(&outcomes);
        let wall_time_s = start.elapsed().as_secs_f64();
        if let Some(dir) = out_dir {
            write_trials_csv(&dir.join("trials.csv"), &summary.trial_table)?;
            fs::write(dir.join("summary.json"), to_json(&summary)?)?;
            let meta = Metadata {
                config: self.config.clone(),
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                parallel_feature: cfg!(feature = "parallel"),
                execution: format!("{:?}", self.execution()),
                wall_time_s,
            };
            fs::write(dir.join("metadata.json"), to_json(&meta)?)?;
        }
        Ok(StudyOutput {
            summary,
            wall_time_s,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    /// Aggregates in trial-index order.
    pub fn summarize(&self, outcomes: &[TrialOutcome]) -> StudySummary {
        let mut table = Vec::new();
        for o in outcomes {
            let complete = o.completed();
            for r in &o.runs {
                let (status, mse, cost, reason) = match &r.result {
                    Ok((s, _)) if complete => (TrialStatus::Ok, Some(s.mse), Some(s.avg_cost), None),
                    Ok((s, _)) => (TrialStatus::Excluded, Some(s.mse), Some(s.avg_cost), None),
                    Err(e) => (TrialStatus::Failed, None, None, Some(e.clone())),
                };
                table.push(TrialRecord {
                    trial: o.trial,
                    seed: o.seed,
                    estimator: r.kind,
                    status,
                    mse,
                    avg_cost: cost,
                    reason,
                });
            }
        }
        let done: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.completed()).collect();
        let dt = self.scenario.dt();
        let times: Vec<f64> = (1..=self.steps).map(|j| j as f64 * dt).collect();

        let estimators: Vec<EstimatorAggregate> = self
            .kinds
            .iter()
            .enumerate()
            .map(|(slot, &kind)| {
                let runs: Vec<&(RunSummary, Vec<f64>)> =
                    done.iter().filter_map(|o| o.runs[slot].result.as_ref().ok()).collect();
                let failures: Vec<&String> = outcomes.iter().filter_map(|o| o.runs[slot].result.as_ref().err()).collect();
                let mses: Vec<f64> = runs.iter().map(|r| r.0.mse).collect();
                let costs: Vec<f64> = runs.iter().map(|r| r.0.avg_cost).collect();
                let curves = percentile_curves(&times, &runs.iter().map(|r| r.1.as_slice()).collect::<Vec<_>>());
                EstimatorAggregate {
                    estimator: kind,
                    failures: failures.len(),
                    risk_limit_failures: failures.iter().filter(|e| e.starts_with("risk limit exceeded")).count(),
                    mse_mean: mean(&mses),
                    mse_median: median(&mses),
                    avg_cost_mean: mean(&costs),
                    avg_cost_median: median(&costs),
                    curves,
                }
            })
            .collect();

        let pair = |f: fn(&EstimatorAggregate) -> Option<f64>| {
            let base = estimators.iter().find(|a| a.estimator == EstimatorKind::Ekf).and_then(f)?;
            let cand = estimators.iter().find(|a| a.estimator == EstimatorKind::RsEkf).and_then(f)?;
            Some(improvement_pct(base, cand))
        };
        StudySummary {
            preset: self.preset,
            mu: self.risk.mu,
            seed: self.config.seed,
            trials: outcomes.len(),
            completed: done.len(),
            failed: outcomes.len() - done.len(),
            mse_improvement_pct: pair(|a| a.mse_mean),
            median_mse_improvement_pct: pair(|a| a.mse_median),
            cost_improvement_pct: pair(|a| a.avg_cost_mean),
            estimators,
            trial_table: table,
        }
    }
}

pub fn trajectory_file(trial: usize, kind: EstimatorKind) -> String {
    format!("trial_{trial:04}_{kind}.csv")
}

/// Resolves and runs a config; files go to `out_dir` when given.
pub fn run_study(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<StudyOutput> {
    Study::prepare(config)?.run(out_dir)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Schema(e.to_string()))
}

pub const TRIALS_HEADER: [&str; 7] = ["trial", "seed", "estimator", "status", "mse", "avg_cost", "reason"];

pub fn write_trials_csv(path: &Path, rows: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(TRIALS_HEADER).map_err(csv_err)?;
    for r in rows {
        let status = match r.status {
            TrialStatus::Ok => "ok",
            TrialStatus::Failed => "failed",
            TrialStatus::Excluded => "excluded",
        };
        w.write_record([
            r.trial.to_string(),
            r.seed.to_string(),
            r.estimator.label().to_string(),
            status.to_string(),
            r.mse.map(fmt_f64).unwrap_or_default(),
            r.avg_cost.map(fmt_f64).unwrap_or_default(),
            r.reason.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `trials.csv` back into records.
pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| -> Result<Option<f64>> {
            match field(i) {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| Error::Schema(format!("bad number `{s}` in trials.csv"))),
            }
        };
        let estimator = match field(2) {
            "ekf" => EstimatorKind::Ekf,
            "rs-ekf" => EstimatorKind::RsEkf,
            "perfect" => EstimatorKind::Perfect,
            s => return Err(Error::Schema(format!("unknown estimator `{s}` in trials.csv"))),
        };
        let status = match field(3) {
            "ok" => TrialStatus::Ok,
            "failed" => TrialStatus::Failed,
            "excluded" => TrialStatus::Excluded,
            s => return Err(Error::Schema(format!("unknown status `{s}` in trials.csv"))),
        };
        out.push(TrialRecord {
            trial: field(0).parse().map_err(|_| Error::Schema("bad trial index".into()))?,
            seed: field(1).parse().map_err(|_| Error::Schema("bad seed".into()))?,
            estimator,
            status,
            mse: num(4)?,
            avg_cost: num(5)?,
            reason: Some(field(6).to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("csv: {e}"))
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    (!s.is_empty()).then(|| percentile_sorted(&s, 50.0))
}

/// Linear interpolation between closest ranks.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn percentile_curves(t: &[f64], series: &[&[f64]]) -> PercentileCurves {
    if series.is_empty() {
        return PercentileCurves::default();
    }
    let mut out = PercentileCurves {
        t: t.to_vec(),
        ..Default::default()
    };
    for k in 0..t.len() {
        let mut col: Vec<f64> = series.iter().map(|s| s[k]).collect();
        col.sort_by(f64::total_cmp);
        out.p25.push(percentile_sorted(&col, 25.0));
        out.p50.push(percentile_sorted(&col, 50.0));
        out.p75.push(percentile_sorted(&col, 75.0));
    }
    out
}
