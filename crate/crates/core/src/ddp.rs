//! Differential dynamic programming (iLQR variant).
//!
//! Dynamics are linearized to first order (Gauss-Newton DDP). Besides the
//! optimized controls, [`solve`] returns the backward-pass value expansion at
//! every node, which is what the risk-sensitive filter consumes.

use nalgebra::{DMatrix, DVector};

use crate::linalg::symmetrize;
use crate::models::{control_jacobian, dyn_jacobian};
use crate::ocp::OcProblem;
use crate::{Error, Result};

/// Quadratic model of the value function around `anchor`:
/// `V(x) ~ V(anchor) + v_x' dx + 1/2 dx' V_xx dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueQuadratic {
    pub anchor: DVector<f64>,
    pub v_x: DVector<f64>,
    pub v_xx: DMatrix<f64>,
}

impl ValueQuadratic {
    pub fn zeros(n: usize) -> Self {
        Self {
            anchor: DVector::zeros(n),
            v_x: DVector::zeros(n),
            v_xx: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpOptions {
    pub max_iters: usize,
    /// Stop when the cost improvement (actual or predicted) drops below this.
    pub tol_cost: f64,
    /// Stop when the largest feedforward norm drops below this.
    pub tol_feedforward: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_increase: f64,
    pub reg_decrease: f64,
    /// Fraction of the predicted decrease a line-search step must realize.
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for DdpOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol_cost: 1e-9,
            tol_feedforward: 1e-9,
            reg_min: 1e-9,
            reg_max: 1e9,
            reg_increase: 10.0,
            reg_decrease: 5.0,
            armijo: 1e-4,
            min_step: 1.0 / 1024.0,
        }
    }
}

/// Feedforward `k` and feedback `K` per stage: `u = u_nom + a k + K (x - x_nom)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub feedforward: Vec<DVector<f64>>,
    pub feedback: Vec<DMatrix<f64>>,
}

impl Gains {
    pub fn max_feedforward_norm(&self) -> f64 {
        self.feedforward.iter().map(|k| k.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub gains: Gains,
    /// `H + 1` expansions; node `k` is anchored at `states[k]`.
    pub values: Vec<ValueQuadratic>,
    /// Terms of the predicted change `a * d1 + a^2 * d2`.
    pub d1: f64,
    pub d2: f64,
}

impl BackwardPass {
    /// Predicted cost decrease (positive) for a line-search step `a`.
    pub fn expected_decrease(&self, a: f64) -> f64 {
        -(a * self.d1 + a * a * self.d2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct DdpSolution {
    pub controls: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub value_expansions: Vec<ValueQuadratic>,
    pub gains: Gains,
    pub cost: f64,
    /// Accepted forward passes.
    pub iterations: usize,
    pub converged: bool,
}

/// One Riccati-like sweep over the nominal trajectory with `reg * I` added to `Q_uu`.
///
/// Fails with [`Error::NotPositiveDefinite`] when the regularized `Q_uu` cannot be
/// factorized; callers raise `reg` and retry.
pub fn backward_pass(
    ocp: &OcProblem,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    reg: f64,
) -> Result<BackwardPass> {
    let horizon = ocp.horizon;
    let nu = ocp.control_dim();
    debug_assert_eq!(states.len(), horizon + 1);

    let term = ocp.expand_terminal(&states[horizon]);
    let mut v_x = term.lx;
    let mut v_xx = symmetrize(&term.lxx);

    let mut values = vec![ValueQuadratic::zeros(0); horizon + 1];
    values[horizon] = ValueQuadratic {
        anchor: states[horizon].clone(),
        v_x: v_x.clone(),
        v_xx: v_xx.clone(),
    };
    let mut feedforward = vec![DVector::zeros(nu); horizon];
    let mut feedback = vec![DMatrix::zeros(nu, 0); horizon];
    let (mut d1, mut d2) = (0.0, 0.0);

    for k in (0..horizon).rev() {
        let (x, u) = (&states[k], &controls[k]);
        let e = ocp.expand_stage(k, x, u)?;
        let a = dyn_jacobian(ocp.model.as_ref(), x, u);
        let b = control_jacobian(ocp.model.as_ref(), x, u);
        let bt_vxx = b.transpose() * &v_xx;

        let q_x = &e.lx + a.transpose() * &v_x;
        let q_u = &e.lu + b.transpose() * &v_x;
        let q_xx = &e.lxx + a.transpose() * &v_xx * &a;
        let q_uu = symmetrize(&(&e.luu + &bt_vxx * &b));
        let q_ux = &e.lux + &bt_vxx * &a;

        let q_uu_reg = &q_uu + DMatrix::identity(nu, nu) * reg;
        let chol = q_uu_reg
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("Q_uu"))?;
        let k_ff = -chol.solve(&q_u);
        let k_fb = -chol.solve(&q_ux);

        d1 += k_ff.dot(&q_u);
        d2 += 0.5 * k_ff.dot(&(&q_uu * &k_ff));

        let kt_quu = k_fb.transpose() * &q_uu;
        v_x = &q_x + &kt_quu * &k_ff + k_fb.transpose() * &q_u + q_ux.transpose() * &k_ff;
        v_xx = symmetrize(&(&q_xx + &kt_quu * &k_fb + k_fb.transpose() * &q_ux + q_ux.transpose() * &k_fb));

        values[k] = ValueQuadratic {
            anchor: x.clone(),
            v_x: v_x.clone(),
            v_xx: v_xx.clone(),
        };
        feedforward[k] = k_ff;
        feedback[k] = k_fb;
    }

    Ok(BackwardPass {
        gains: Gains {
            feedforward,
            feedback,
        },
        values,
        d1,
        d2,
    })
}

/// Rolls out `u = u_nom + step * k + K (x - x_nom)` from the nominal initial state.
pub fn forward_pass(ocp: &OcProblem, nominal: &Trajectory, gains: &Gains, step: f64) -> Result<Trajectory> {
    let horizon = ocp.horizon;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    states.push(nominal.states[0].clone());
    for k in 0..horizon {
        let dx = &states[k] - &nominal.states[k];
        let u = &nominal.controls[k] + &gains.feedforward[k] * step + &gains.feedback[k] * dx;
        let next = ocp.model.transition(&states[k], &u);
        if !next.iter().chain(u.iter()).all(|v| v.is_finite()) {
            return Err(Error::DivergedRollout(k));
        }
        controls.push(u);
        states.push(next);
    }
    let cost = ocp.trajectory_cost(&states, &controls);
    if !cost.is_finite() {
        return Err(Error::DivergedRollout(horizon));
    }
    Ok(Trajectory {
        states,
        controls,
        cost,
    })
}

/// Backtracking line search: halves the step from 1 until the realized decrease
/// reaches `armijo` times the predicted one.
pub fn line_search(
    ocp: &OcProblem,
    nominal: &Trajectory,
    bp: &BackwardPass,
    opts: &DdpOptions,
) -> Option<Trajectory> {
    let mut step = 1.0;
    while step >= opts.min_step {
        if let Ok(cand) = forward_pass(ocp, nominal, &bp.gains, step) {
            let expected = bp.expected_decrease(step);
            if expected > 0.0 && nominal.cost - cand.cost >= opts.armijo * expected {
                return Some(cand);
            }
        }
        step *= 0.5;
    }
    None
}

/// Minimizes the problem from `x0`. Without a warm start the controls start at zero.
pub fn solve(
    ocp: &OcProblem,
    x0: &DVector<f64>,
    warm_start: Option<&[DVector<f64>]>,
    opts: &DdpOptions,
) -> Result<DdpSolution> {
    let controls = match warm_start {
        Some(us) => us.to_vec(),
        None => vec![DVector::zeros(ocp.control_dim()); ocp.horizon],
    };
    let states = ocp.rollout(x0, &controls)?;
    let cost = ocp.trajectory_cost(&states, &controls);
    if !cost.is_finite() {
        return Err(Error::DivergedRollout(ocp.horizon));
    }
    let mut nominal = Trajectory {
        states,
        controls,
        cost,
    };

    let mut reg = opts.reg_min;
    let mut iterations = 0;
    let mut small_improvement = false;

    loop {
        let bp = match backward_pass(ocp, &nominal.states, &nominal.controls, reg) {
            Ok(bp) => bp,
            Err(Error::NotPositiveDefinite(_)) => {
                if reg >= opts.reg_max {
                    return Err(Error::SolverFailure(format!(
                        "Q_uu not positive-definite at regularization {reg:e}"
                    )));
                }
                reg = (reg * opts.reg_increase).min(opts.reg_max);
                continue;
            }
            Err(e) => return Err(e),
        };

        let converged = small_improvement
            || bp.gains.max_feedforward_norm() < opts.tol_feedforward
            || bp.expected_decrease(1.0) < opts.tol_cost;
        if converged || iterations >= opts.max_iters {
            return Ok(finish(nominal, bp, iterations, converged));
        }

        match line_search(ocp, &nominal, &bp, opts) {
            Some(cand) => {
                small_improvement = nominal.cost - cand.cost < opts.tol_cost;
                nominal = cand;
                iterations += 1;
                reg = (reg / opts.reg_decrease).max(opts.reg_min);
            }
            None if reg >= opts.reg_max => {
                return Ok(finish(nominal, bp, iterations, false));
            }
            None => reg = (reg * opts.reg_increase).min(opts.reg_max),
        }
    }
}

fn finish(nominal: Trajectory, bp: BackwardPass, iterations: usize, converged: bool) -> DdpSolution {
    DdpSolution {
        controls: nominal.controls,
        states: nominal.states,
        value_expansions: bp.values,
        gains: bp.gains,
        cost: nominal.cost,
        iterations,
        converged,
    }
}

pub fn value_at_node(sol: &DdpSolution, k: usize) -> Result<ValueQuadratic> {
    sol.value_expansions
        .get(k)
        .cloned()
        .ok_or(Error::IndexOutOfRange {
            index: k,
            limit: sol.value_expansions.len(),
        })
}

/// Receding-horizon warm start: drop the first control, repeat the last.
pub fn shift_controls(controls: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out: Vec<_> = controls.iter().skip(1).cloned().collect();
    if let Some(last) = controls.last() {
        out.push(last.clone());
    }
    out
}
