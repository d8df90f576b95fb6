//! Output-feedback MPC loop.
//!
//! Each step: the plant advances under the held control with sampled process noise
//! and scripted disturbances, a noisy measurement is drawn, the filter predicts and
//! corrects, and (at the replanning rate) DDP re-solves from the estimate. The
//! risk-sensitive filter consumes node 1 of the most recent solve, re-anchored at
//! the filter's predicted mean.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ddp::{self, value_at_node, DdpOptions, DdpSolution, ValueQuadratic};
use crate::filters::{self, GaussianBelief, RiskConfig};
use crate::linalg::min_eigenvalue;
use crate::models::{NoiseSpec, SystemModel};
use crate::ocp::OcProblem;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "ekf")]
    Ekf,
    #[serde(rename = "rs-ekf")]
    RsEkf,
    /// Controller sees the true state. Used to build reference trajectories.
    #[serde(rename = "perfect")]
    Perfect,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Ekf => "ekf",
            EstimatorKind::RsEkf => "rs-ekf",
            EstimatorKind::Perfect => "perfect",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceKind {
    /// Adds `magnitude[0]` to the plant's mass while active.
    MassChange,
    /// Applies the `magnitude` force to the plant while active.
    ExternalForce,
    /// Added to the filter's prior mean at `t = 0`.
    PriorOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    pub start: f64,
    pub end: f64,
    pub kind: DisturbanceKind,
    pub magnitude: Vec<f64>,
}

impl DisturbanceEvent {
    pub fn is_active(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceScript {
    #[serde(default)]
    pub events: Vec<DisturbanceEvent>,
}

impl DisturbanceScript {
    pub fn new(events: Vec<DisturbanceEvent>) -> Self {
        Self { events }
    }

    pub fn validate(&self, run_length: f64) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            let field = format!("script.events[{i}]");
            if !(0.0 <= e.start && e.start < e.end && e.end <= run_length + 1e-9) {
                return Err(Error::validation(
                    field,
                    format!("need 0 <= start < end <= {run_length}, got [{}, {}]", e.start, e.end),
                ));
            }
            if e.magnitude.is_empty() || !e.magnitude.iter().all(|m| m.is_finite()) {
                return Err(Error::validation(field, "magnitude must be non-empty and finite"));
            }
        }
        Ok(())
    }

    /// Drops events starting at or after `run_length` and clips the rest to it.
    pub fn truncated(&self, run_length: f64) -> Self {
        let events = self
            .events
            .iter()
            .filter(|e| e.start < run_length)
            .map(|e| DisturbanceEvent {
                end: e.end.min(run_length),
                ..e.clone()
            })
            .collect();
        Self { events }
    }

    /// Active plant-side events of `kind` at time `t`.
    pub fn active(&self, kind: DisturbanceKind, t: f64) -> impl Iterator<Item = &DisturbanceEvent> {
        self.events
            .iter()
            .filter(move |e| e.kind == kind && e.is_active(t))
    }

    /// Sum of prior-offset events, padded or truncated to `n`.
    pub fn prior_offset(&self, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for e in self.events.iter().filter(|e| e.kind == DisturbanceKind::PriorOffset) {
            for (o, m) in out.iter_mut().zip(&e.magnitude) {
                *o += m;
            }
        }
        out
    }
}

/// Ground-truth evolution of a benchmark. The plant shares its state layout with
/// the filter model but may differ in parameters (true mass, external forces).
pub trait Plant: Send + Sync {
    fn advance(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, script: &DisturbanceScript) -> DVector<f64>;
}

pub type TrackedFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Everything a closed-loop run needs besides estimator kind, risk and seed.
#[derive(Clone)]
pub struct Scenario {
    pub plant: Arc<dyn Plant>,
    pub filter_model: Arc<dyn SystemModel>,
    pub noise: NoiseSpec,
    /// Covariance of the process noise actually injected into the plant (PSD).
    pub plant_process_cov: DMatrix<f64>,
    /// Covariance of the measurement noise actually drawn (PSD).
    pub plant_meas_cov: DMatrix<f64>,
    pub ocp: OcProblem,
    pub x0: DVector<f64>,
    pub prior_mean: DVector<f64>,
    /// Filter steps per MPC solve.
    pub mpc_every: usize,
    pub ddp: DdpOptions,
    /// Quantity compared against the reference when computing the MSE.
    pub tracked: TrackedFn,
    /// Actuator limits applied to the planned control; the plant and the
    /// filter both see the clamped value.
    pub control_limits: Option<ControlLimits>,
    /// Constant control used to initialise the first solve; zeros if absent.
    pub initial_control: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlLimits {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlLimits {
    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].max(self.lower[i]).min(self.upper[i]))
    }
}

impl Scenario {
    pub fn dt(&self) -> f64 {
        self.filter_model.dt()
    }

    fn applied(&self, u: &DVector<f64>) -> DVector<f64> {
        self.control_limits.as_ref().map_or_else(|| u.clone(), |l| l.clamp(u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub replanned: bool,
    pub iterations: usize,
    pub converged: bool,
    pub failed: bool,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x_true: DVector<f64>,
    pub y: DVector<f64>,
    pub x_pred: DVector<f64>,
    /// Plain EKF posterior mean (equals `x_hat` for the EKF).
    pub x_ekf: DVector<f64>,
    /// Estimate handed to the controller.
    pub x_hat: DVector<f64>,
    pub cov_diag: DVector<f64>,
    pub cov_min_eig: f64,
    /// Minimum eigenvalue of `P^-1 - mu V_xx` (risk-sensitive runs only).
    pub well_posedness: Option<f64>,
    pub u: DVector<f64>,
    pub cost: f64,
    pub tracked: DVector<f64>,
    pub solve: SolveStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub estimator: EstimatorKind,
    pub mu: f64,
    pub seed: u64,
    pub rows: Vec<StepRecord>,
}

/// Samples `N(0, cov)` for PSD `cov` through a symmetric square root, always
/// drawing `n` standard normals so the draw count never depends on the covariance.
struct GaussianSampler {
    root: DMatrix<f64>,
}

impl GaussianSampler {
    fn new(cov: &DMatrix<f64>) -> Self {
        let eig = crate::linalg::symmetrize(cov).symmetric_eigen();
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Self {
            root: &eig.eigenvectors * DMatrix::from_diagonal(&sqrt),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.root * z
    }
}

/// Solves the problem once from the prior mean; its node-1 expansion seeds the
/// first risk-sensitive update.
pub fn first_step_bootstrap(
    ocp: &OcProblem,
    prior_mean: &DVector<f64>,
    initial_control: Option<&DVector<f64>>,
    opts: &DdpOptions,
) -> Result<DdpSolution> {
    let warm = initial_control.map(|u| vec![u.clone(); ocp.horizon]);
    ddp::solve(ocp, prior_mean, warm.as_deref(), opts)
}

fn node_one(sol: &DdpSolution) -> ValueQuadratic {
    value_at_node(sol, 1.min(sol.value_expansions.len() - 1)).expect("solution has nodes")
}

pub fn run_closed_loop(
    scenario: &Scenario,
    kind: EstimatorKind,
    risk: &RiskConfig,
    script: &DisturbanceScript,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryLog> {
    let dt = scenario.dt();
    script.validate(steps as f64 * dt)?;
    let n = scenario.x0.len();
    let model = scenario.filter_model.as_ref();
    let mpc_every = scenario.mpc_every.max(1);
    let replan_dt = mpc_every as f64 * dt;
    let shift = (replan_dt / scenario.ocp.model.dt()).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let process = GaussianSampler::new(&scenario.plant_process_cov);
    let meas = GaussianSampler::new(&scenario.plant_meas_cov);

    let prior = &scenario.prior_mean + script.prior_offset(n);
    let mut belief = GaussianBelief::new(prior, scenario.noise.p0.clone())?;
    let mut x_true = scenario.x0.clone();

    let x_plan0 = if kind == EstimatorKind::Perfect { &x_true } else { &belief.mean };
    let mut plan = first_step_bootstrap(&scenario.ocp.at_time(0.0), x_plan0, scenario.initial_control.as_ref(), &scenario.ddp)?;
    let mut value = node_one(&plan);
    let mut u = scenario.applied(&plan.controls[0]);

    let mut rows = Vec::with_capacity(steps);
    for j in 1..=steps {
        let t_prev = (j - 1) as f64 * dt;
        let t = j as f64 * dt;

        x_true = scenario.plant.advance(t_prev, &x_true, &u, script) + process.sample(&mut rng);
        let y = model.observe(&x_true) + meas.sample(&mut rng);
        if !x_true.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("plant state"));
        }

        let pred = filters::predict(&belief, model, &u, &scenario.noise.q)?;
        // The belief always carries the EKF posterior; the risk-sensitive
        // shift only changes the point handed to the controller.
        let (x_ekf, x_hat, well_posedness) = match kind {
            EstimatorKind::Ekf => {
                belief = filters::update_ekf(&pred, model, &y, &scenario.noise.r)?.0;
                (belief.mean.clone(), belief.mean.clone(), None)
            }
            EstimatorKind::RsEkf => {
                let vq = filters::reanchor_value(&value, &pred.mean);
                let up = filters::update_rs_detailed(&pred, model, &y, &scenario.noise.r, risk, &vq)?;
                belief = GaussianBelief {
                    mean: up.ekf_mean.clone(),
                    cov: up.belief.cov,
                };
                (up.ekf_mean, up.belief.mean, Some(up.well_posedness))
            }
            EstimatorKind::Perfect => {
                belief = filters::update_ekf(&pred, model, &y, &scenario.noise.r)?.0;
                (belief.mean.clone(), x_true.clone(), None)
            }
        };

        let mut solve = SolveStats {
            replanned: false,
            iterations: 0,
            converged: true,
            failed: false,
            cost: plan.cost,
        };
        if j % mpc_every == 0 {
            let warm: Vec<_> = (0..shift).fold(plan.controls.clone(), |us, _| ddp::shift_controls(&us));
            solve.replanned = true;
            match ddp::solve(&scenario.ocp.at_time(t), &x_hat, Some(&warm), &scenario.ddp) {
                Ok(sol) => {
                    solve.iterations = sol.iterations;
                    solve.converged = sol.converged;
                    solve.cost = sol.cost;
                    plan = sol;
                    value = node_one(&plan);
                    u = scenario.applied(&plan.controls[0]);
                }
                Err(_) => {
                    solve.failed = true;
                    solve.converged = false;
                }
            }
        }

        let cost = scenario.ocp.cost.stage_cost(t, &x_true, &u);
        rows.push(StepRecord {
            t,
            tracked: (scenario.tracked)(t, &x_true),
            x_true: x_true.clone(),
            y,
            x_pred: pred.mean,
            x_ekf,
            x_hat,
            cov_diag: belief.cov.diagonal(),
            cov_min_eig: min_eigenvalue(&belief.cov),
            well_posedness,
            u: u.clone(),
            cost,
            solve,
        });
    }

    Ok(TrajectoryLog {
        estimator: kind,
        mu: risk.mu,
        seed,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mse: f64,
    pub avg_cost: f64,
}

/// Mean over rows of `|tracked - reference|^2`, and mean incurred stage cost.
pub fn summarize(log: &TrajectoryLog, reference: &[DVector<f64>]) -> Result<RunSummary> {
    summarize_window(log, reference, 0)
}

/// As [`summarize`], restricted to rows `from..`.
pub fn summarize_window(log: &TrajectoryLog, reference: &[DVector<f64>], from: usize) -> Result<RunSummary> {
    if reference.len() != log.rows.len() {
        return Err(Error::Dimension {
            what: "reference trajectory",
            expected: log.rows.len(),
            got: reference.len(),
        });
    }
    let rows = &log.rows[from.min(log.rows.len())..];
    let refs = &reference[from.min(reference.len())..];
    let count = rows.len().max(1) as f64;
    let mse = rows
        .iter()
        .zip(refs)
        .map(|(r, p)| (&r.tracked - p).norm_squared())
        .sum::<f64>()
        / count;
    let avg_cost = rows.iter().map(|r| r.cost).sum::<f64>() / count;
    Ok(RunSummary { mse, avg_cost })
}

/// Per-row squared tracking error.
pub fn squared_errors(log: &TrajectoryLog, reference: &[DVector<f64>]) -> Vec<f64> {
    log.rows
        .iter()
        .zip(reference)
        .map(|(r, p)| (&r.tracked - p).norm_squared())
        .collect()
}

/// Float formatting used by every CSV the crate writes: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl TrajectoryLog {
    /// Column order: `t, x_true.., x_hat.., u.., cost`, then the filter trace and
    /// solver stats.
    pub fn csv_header(&self) -> Vec<String> {
        let Some(r) = self.rows.first() else {
            return vec!["t".into(), "cost".into()];
        };
        let mut h = vec!["t".to_string()];
        let mut push = |name: &str, n: usize| h.extend((0..n).map(|i| format!("{name}_{i}")));
        push("x_true", r.x_true.len());
        push("x_hat", r.x_hat.len());
        push("u", r.u.len());
        h.push("cost".into());
        let mut push = |name: &str, n: usize| h.extend((0..n).map(|i| format!("{name}_{i}")));
        push("x_pred", r.x_pred.len());
        push("x_ekf", r.x_ekf.len());
        push("p_diag", r.cov_diag.len());
        push("y", r.y.len());
        push("tracked", r.tracked.len());
        h.extend(
            ["cov_min_eig", "well_posedness", "replanned", "solve_iters", "solve_converged", "solve_failed"]
                .map(String::from),
        );
        h
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.csv_header().join(","))?;
        for r in &self.rows {
            let mut cells = vec![fmt_f64(r.t)];
            for v in [&r.x_true, &r.x_hat, &r.u] {
                cells.extend(v.iter().map(|x| fmt_f64(*x)));
            }
            cells.push(fmt_f64(r.cost));
            for v in [&r.x_pred, &r.x_ekf, &r.cov_diag, &r.y, &r.tracked] {
                cells.extend(v.iter().map(|x| fmt_f64(*x)));
            }
            cells.push(fmt_f64(r.cov_min_eig));
            cells.push(r.well_posedness.map(fmt_f64).unwrap_or_default());
            cells.push(u8::from(r.solve.replanned).to_string());
            cells.push(r.solve.iterations.to_string());
            cells.push(u8::from(r.solve.converged).to_string());
            cells.push(u8::from(r.solve.failed).to_string());
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearModel;
    use crate::ocp::QuadraticCost;
    use nalgebra::dvector;

    struct LinearPlant(LinearModel);

    impl Plant for LinearPlant {
        fn advance(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>, _s: &DisturbanceScript) -> DVector<f64> {
            self.0.transition(x, u)
        }
    }

    fn double_integrator(noise: f64) -> Scenario {
        let dt = 0.1;
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, dt]),
            DMatrix::identity(2, 2),
            dt,
        );
        let cost = QuadraticCost {
            x_ref: dvector![1.0, 0.0],
            u_ref: dvector![0.0],
            wx: DMatrix::identity(2, 2),
            wu: DMatrix::identity(1, 1) * 0.1,
            wf: DMatrix::identity(2, 2) * 10.0,
        };
        let m = Arc::new(model.clone());
        Scenario {
            plant: Arc::new(LinearPlant(model)),
            filter_model: m.clone(),
            noise: NoiseSpec::from_diagonals(&[1e-3, 1e-3], &[1e-2, 1e-2], &[1e-2, 1e-2]).unwrap(),
            plant_process_cov: DMatrix::identity(2, 2) * noise,
            plant_meas_cov: DMatrix::identity(2, 2) * noise,
            ocp: OcProblem::new(m, Arc::new(cost), 10),
            x0: dvector![0.0, 0.0],
            prior_mean: dvector![0.0, 0.0],
            mpc_every: 1,
            ddp: DdpOptions::default(),
            tracked: Arc::new(|_, x: &DVector<f64>| x.rows(0, 1).into_owned()),
            control_limits: None,
            initial_control: None,
        }
    }

    #[test]
    fn noiseless_zero_mu_logs_match() {
        let sc = double_integrator(0.0);
        let risk = RiskConfig::new(0.0).unwrap();
        let s = DisturbanceScript::default();
        let a = run_closed_loop(&sc, EstimatorKind::Ekf, &risk, &s, 30, 1).unwrap();
        let b = run_closed_loop(&sc, EstimatorKind::RsEkf, &risk, &s, 30, 1).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.x_true, rb.x_true);
            assert_eq!(ra.x_hat, rb.x_hat);
            assert_eq!(ra.u, rb.u);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let sc = double_integrator(1e-4);
        let risk = RiskConfig::new(0.05).unwrap();
        let s = DisturbanceScript::default();
        let a = run_closed_loop(&sc, EstimatorKind::RsEkf, &risk, &s, 20, 7).unwrap();
        let b = run_closed_loop(&sc, EstimatorKind::RsEkf, &risk, &s, 20, 7).unwrap();
        assert_eq!(a, b);
        let c = run_closed_loop(&sc, EstimatorKind::RsEkf, &risk, &s, 20, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn summary_cases() {
        let sc = double_integrator(0.0);
        let risk = RiskConfig::new(0.0).unwrap();
        let log = run_closed_loop(&sc, EstimatorKind::Ekf, &risk, &DisturbanceScript::default(), 10, 0).unwrap();
        let exact: Vec<_> = log.rows.iter().map(|r| r.tracked.clone()).collect();
        assert_eq!(summarize(&log, &exact).unwrap().mse, 0.0);
        let offset: Vec<_> = exact.iter().map(|p| p.add_scalar(0.1)).collect();
        assert!((summarize(&log, &offset).unwrap().mse - 0.01).abs() < 1e-15);
        let s = summarize(&log, &exact).unwrap();
        let mean_cost = log.rows.iter().map(|r| r.cost).sum::<f64>() / 10.0;
        assert_eq!(s.avg_cost, mean_cost);
        assert!(summarize(&log, &exact[1..]).is_err());
    }

    #[test]
    fn script_validation() {
        let ev = |start, end| DisturbanceEvent {
            start,
            end,
            kind: DisturbanceKind::ExternalForce,
            magnitude: vec![1.0],
        };
        assert!(DisturbanceScript::new(vec![ev(0.0, 1.0)]).validate(1.0).is_ok());
        assert!(DisturbanceScript::new(vec![ev(0.5, 0.5)]).validate(1.0).is_err());
        assert!(DisturbanceScript::new(vec![ev(0.5, 2.0)]).validate(1.0).is_err());
        let mut bad = ev(0.0, 1.0);
        bad.magnitude = vec![f64::NAN];
        assert!(DisturbanceScript::new(vec![bad]).validate(1.0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let sc = double_integrator(0.0);
        let risk = RiskConfig::new(0.0).unwrap();
        let log = run_closed_loop(&sc, EstimatorKind::Ekf, &risk, &DisturbanceScript::default(), 5, 0).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("t,x_true_0,x_true_1,x_hat_0,x_hat_1,u_0,cost,"));
        let ncols = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == ncols));
    }
}
