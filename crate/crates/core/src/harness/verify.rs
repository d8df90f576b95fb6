//! Randomized checks of the filter and solver against the dense oracles.

use std::time::Instant;

use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::benchmarks::quadrotor::{make_quadrotor, QuadrotorSetup};
use crate::ddp::{self, DdpOptions};
use crate::filters::{self, GaussianBelief, Prediction, RiskConfig};
use crate::models::LinearModel;
use crate::oracle::{self, FilterInstance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    /// Largest observed error, compared against `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_s: f64,
    pub detail: String,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} cases={:<5} worst={:.3e} tol={:.1e} time={:.2}s {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            self.elapsed_s,
            self.detail
        )
    }
}

fn report(name: &'static str, cases: usize, worst: f64, tolerance: f64, start: Instant, detail: String) -> CheckReport {
    CheckReport {
        name,
        cases,
        worst,
        tolerance,
        passed: worst <= tolerance && detail.is_empty(),
        elapsed_s: start.elapsed().as_secs_f64(),
        detail,
    }
}

/// The instance's filter step through the production code path: predict from
/// the prior, then the EKF and risk-sensitive updates.
pub fn filter_step(inst: &FilterInstance) -> Result<(GaussianBelief, GaussianBelief)> {
    let model = inst.linear_model();
    let prior = GaussianBelief::new(inst.prior_mean.clone(), inst.prior_cov.clone())?;
    let pred: Prediction = filters::predict(&prior, &model, &dvector![0.0], &inst.q)?;
    let y = inst.measurement();
    let ekf = filters::update_ekf(&pred, &model, &y, &inst.r)?.0;
    let rs = filters::update_rs(&pred, &model, &y, &inst.r, &RiskConfig::new(inst.mu)?, &inst.value)?;
    Ok((ekf, rs))
}

/// With `mu = 0` the risk-sensitive mean equals the EKF mean.
pub fn check_mu_zero(cases: usize, seed: u64) -> CheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut detail = String::new();
    for _ in 0..cases {
        let n = rng.random_range(1..=6);
        let mut inst = oracle::random_instance(&mut rng, n);
        inst.mu = 0.0;
        match filter_step(&inst) {
            Ok((ekf, rs)) => worst = worst.max((ekf.mean - rs.mean).amax()),
            Err(e) => detail = format!("filter error: {e}"),
        }
    }
    report("mu-zero-reduction", cases, worst, 1e-12, start, detail)
}

/// Closed form against the joint maximizer, plus the three-route reduction.
pub fn check_oracle(cases: usize, seed: u64) -> (CheckReport, CheckReport) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_red) = (0.0_f64, 0.0_f64);
    let mut detail = String::new();
    for _ in 0..cases {
        let n = rng.random_range(1..=6);
        let inst = oracle::random_instance(&mut rng, n);
        let step = filter_step(&inst);
        let joint = oracle::argmax_joint(&inst);
        let red = oracle::verify_reduction(&inst);
        match (step, joint, red) {
            (Ok((_, rs)), Ok((_, x_t)), Ok(red)) => {
                let scale = x_t.amax().max(1.0);
                worst = worst.max((rs.mean - x_t).amax() / scale);
                worst_red = worst_red.max(red.max_deviation);
            }
            (a, b, c) => {
                detail = format!(
                    "failure: {:?} / {:?} / {:?}",
                    a.err().map(|e| e.to_string()),
                    b.err().map(|e| e.to_string()),
                    c.err().map(|e| e.to_string())
                );
            }
        }
    }
    let closed = report("closed-form-vs-oracle", cases, worst, 1e-8, start, detail.clone());
    let reduction = report("reduction-routes", cases, worst_red, 1e-10, start, detail);
    (closed, reduction)
}

/// DDP on random LQR problems against the Riccati recursion. `V = x' S x`
/// in this cost convention, so `V_xx = 2 S`.
pub fn check_ddp_lqr(cases: usize, seed: u64) -> CheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut detail = String::new();
    for case in 0..cases {
        let inst = oracle::random_lqr(&mut rng, 8, 30);
        let ric = inst.riccati();
        let sol = match ddp::solve(&inst.problem(), &inst.x0, None, &DdpOptions::default()) {
            Ok(s) => s,
            Err(e) => {
                detail = format!("case {case}: {e}");
                continue;
            }
        };
        if sol.iterations != 1 {
            detail = format!("case {case}: {} iterations", sol.iterations);
        }
        let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() / b.amax().max(1.0);
        for k in 0..inst.horizon {
            worst = worst.max(rel(&sol.gains.feedback[k], &ric.gains[k]));
        }
        for (k, v) in sol.value_expansions.iter().enumerate() {
            let s2 = &ric.cost_to_go[k] * 2.0;
            let grad: DVector<f64> = &s2 * &sol.states[k];
            worst = worst.max(rel(&v.v_xx, &s2));
            worst = worst.max((&v.v_x - &grad).amax() / grad.amax().max(1.0));
        }
    }
    report("ddp-vs-riccati", cases, worst, 1e-8, start, detail)
}

/// Node-0 value gradient of the quadrotor problem against central differences of
/// the re-solved optimal cost, at `cases` perturbed mid-flight states.
pub fn check_quadrotor_value_gradient(cases: usize, seed: u64) -> CheckReport {
    let start = Instant::now();
    let setup = QuadrotorSetup::default();
    let (_, ocp) = make_quadrotor(setup.params, setup.weights, setup.target, setup.horizon);
    let opts = DdpOptions {
        max_iters: 500,
        tol_cost: 1e-14,
        tol_feedforward: 1e-12,
        ..DdpOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut detail) = (0.0_f64, String::new());
    for case in 0..cases {
        let x0 = dvector![
            rng.random_range(0.0..1.0),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(2.0..5.0)
        ];
        let outcome = (|| -> Result<f64> {
            let sol = ddp::solve(&ocp, &x0, None, &opts)?;
            let h = 1e-5;
            let mut fd = DVector::zeros(x0.len());
            for i in 0..x0.len() {
                let cost = |sign: f64| -> Result<f64> {
                    let mut x = x0.clone();
                    x[i] += sign * h;
                    Ok(ddp::solve(&ocp, &x, Some(&sol.controls), &opts)?.cost)
                };
                fd[i] = (cost(1.0)? - cost(-1.0)?) / (2.0 * h);
            }
            Ok((&sol.value_expansions[0].v_x - &fd).norm() / fd.norm().max(1e-12))
        })();
        match outcome {
            Ok(e) => worst = worst.max(e),
            Err(e) => detail = format!("case {case}: {e}"),
        }
    }
    report("quadrotor-value-gradient", cases, worst, 1e-3, start, detail)
}

/// `P = 1, V_xx = 1, mu = 1` sits exactly on the limit and must be refused.
pub fn check_risk_limit() -> CheckReport {
    let start = Instant::now();
    let one = DMatrix::from_element(1, 1, 1.0);
    let model = LinearModel::new(one.clone(), DMatrix::zeros(1, 1), one.clone(), 1.0);
    // Predicted covariance 1 with an uninformative measurement leaves P_t = 1.
    let pred = Prediction {
        mean: dvector![0.0],
        cov: one.clone(),
    };
    let value = ddp::ValueQuadratic {
        anchor: dvector![0.0],
        v_x: dvector![0.0],
        v_xx: one,
    };
    let r = DMatrix::from_element(1, 1, 1e300);
    let outcome = RiskConfig::new(1.0)
        .and_then(|risk| filters::update_rs(&pred, &model, &dvector![0.0], &r, &risk, &value));
    let detail = match outcome {
        Err(Error::RiskLimitExceeded { .. }) => String::new(),
        Err(e) => format!("wrong error: {e}"),
        Ok(_) => "accepted an ill-posed update".to_string(),
    };
    report("risk-limit-scalar", 1, 0.0, 0.0, start, detail)
}

/// The full suite at the sizes used by the acceptance criteria.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    let (closed, reduction) = check_oracle(500, seed.wrapping_add(1));
    vec![
        check_mu_zero(1000, seed),
        closed,
        reduction,
        check_ddp_lqr(100, seed.wrapping_add(2)),
        check_quadrotor_value_gradient(10, seed.wrapping_add(3)),
        check_risk_limit(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let (closed, red) = check_oracle(30, 5);
        for r in [check_mu_zero(30, 4), closed, red, check_ddp_lqr(10, 6), check_quadrotor_value_gradient(2, 7), check_risk_limit()] {
            assert!(r.passed, "{r}");
        }
    }
}
