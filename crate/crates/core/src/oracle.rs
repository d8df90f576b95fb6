//! Dense reference solvers.
//!
//! Nothing here reuses the recursive code paths of [`crate::filters`] or
//! [`crate::ddp`]: the single-step estimation game is maximized jointly over
//! `(x_{t-1}, x_t)` with one dense solve, and LQR problems are solved by the
//! textbook Riccati recursion. They are slow and meant for verification.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ddp::ValueQuadratic;
use crate::linalg::{max_eigenvalue, min_eigenvalue, symmetrize};
use crate::models::LinearModel;
use crate::ocp::{OcProblem, QuadraticCost};
use crate::{Error, Result};

/// `J(z) = 1/2 z' A z + b' z + c` with symmetric `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub quadratic: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl QuadraticObjective {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.quadratic * z)) + self.linear.dot(z) + self.constant
    }

    /// Unique maximizer; requires `A` negative-definite.
    pub fn argmax(&self) -> Result<DVector<f64>> {
        let top = max_eigenvalue(&self.quadratic);
        if !(top < 0.0) {
            return Err(Error::IllPosed(top));
        }
        let neg = -symmetrize(&self.quadratic);
        let chol = neg.cholesky().ok_or(Error::IllPosed(top))?;
        Ok(chol.solve(&self.linear))
    }
}

/// One filtering step written as a game: prior on `x_{t-1}`, linear(ized)
/// dynamics and measurement about `x_bar = F x_hat_{t-1}`, and a quadratic value
/// model anchored at `x_bar`.
#[derive(Debug, Clone)]
pub struct FilterInstance {
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `y - H x_bar`.
    pub innovation: DVector<f64>,
    pub mu: f64,
    pub value: ValueQuadratic,
}

impl FilterInstance {
    pub fn x_bar(&self) -> DVector<f64> {
        &self.f * &self.prior_mean
    }

    pub fn measurement(&self) -> DVector<f64> {
        &self.h * self.x_bar() + &self.innovation
    }

    /// The instance as a linear system with a single dummy control.
    pub fn linear_model(&self) -> LinearModel {
        let n = self.prior_mean.len();
        LinearModel::new(self.f.clone(), DMatrix::zeros(n, 1), self.h.clone(), 1.0)
    }

    /// `P_t = (H' R^-1 H + P_bar^-1)^-1` in information form.
    pub fn posterior_cov(&self) -> DMatrix<f64> {
        let p_bar = &self.q + &self.f * &self.prior_cov * self.f.transpose();
        let info = spd_inverse(&p_bar) + self.h.transpose() * spd_inverse(&self.r) * &self.h;
        symmetrize(&spd_inverse(&info))
    }
}

fn spd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(
        &symmetrize(m)
            .cholesky()
            .expect("oracle expects positive-definite covariances")
            .inverse(),
    )
}

/// Joint objective over `z = (x_{t-1} - x_hat_{t-1}, x_t - x_bar)`:
///
/// ```text
/// mu/2 dx' V dx + mu dx' v - 1/2 |dy - H dx|^2_{R^-1}
///     - 1/2 |dp|^2_{P^-1} - 1/2 |dx - F dp|^2_{Q^-1}
/// ```
pub fn joint_objective(inst: &FilterInstance) -> QuadraticObjective {
    let n = inst.prior_mean.len();
    let p_inv = spd_inverse(&inst.prior_cov);
    let q_inv = spd_inverse(&inst.q);
    let r_inv = spd_inverse(&inst.r);
    let ft_qinv = inst.f.transpose() * &q_inv;

    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, 0), (n, n))
        .copy_from(&(-(&p_inv + &ft_qinv * &inst.f)));
    a.view_mut((0, n), (n, n)).copy_from(&ft_qinv);
    a.view_mut((n, 0), (n, n)).copy_from(&ft_qinv.transpose());
    a.view_mut((n, n), (n, n)).copy_from(
        &(&inst.value.v_xx * inst.mu - inst.h.transpose() * &r_inv * &inst.h - &q_inv),
    );

    let mut b = DVector::zeros(2 * n);
    b.rows_mut(n, n)
        .copy_from(&(&inst.value.v_x * inst.mu + inst.h.transpose() * &r_inv * &inst.innovation));
    let c = -0.5 * inst.innovation.dot(&(&r_inv * &inst.innovation));

    QuadraticObjective {
        quadratic: symmetrize(&a),
        linear: b,
        constant: c,
    }
}

/// Exact maximizer `(x*_{t-1}, x*_t)` of the joint objective.
pub fn argmax_joint(inst: &FilterInstance) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = inst.prior_mean.len();
    let z = joint_objective(inst).argmax()?;
    Ok((
        &inst.prior_mean + z.rows(0, n),
        inst.x_bar() + z.rows(n, n),
    ))
}

#[derive(Debug, Clone)]
pub struct ReductionReport {
    pub joint: (DVector<f64>, DVector<f64>),
    /// `x_t` after eliminating `x_{t-1}` (predicted-covariance form).
    pub eliminated: DVector<f64>,
    /// `x_t` from the posterior-covariance form.
    pub reduced: DVector<f64>,
    /// Largest gap among the three routes, relative to `max(1, |x*|_inf)`.
    pub max_deviation: f64,
    /// Minimum eigenvalue of `P_t^-1 - mu V_xx`.
    pub well_posedness: f64,
}

/// Solves the instance three ways: jointly, after eliminating `x_{t-1}` via
/// `Q~ = P^-1 + F' Q^-1 F`, and in the single-block form built on `P_t` and
/// `mu_hat`. Reports how far apart the answers are.
pub fn verify_reduction(inst: &FilterInstance) -> Result<ReductionReport> {
    let (x_prev, x_t) = argmax_joint(inst)?;
    let x_bar = inst.x_bar();
    let mu = inst.mu;
    let (v, vxx) = (&inst.value.v_x, &inst.value.v_xx);
    let q_inv = spd_inverse(&inst.q);
    let r_inv = spd_inverse(&inst.r);
    let ht_rinv = inst.h.transpose() * &r_inv;

    // Eliminate x_{t-1}: dp = Q~^-1 F' Q^-1 dx, leaving a P_bar^-1 penalty on dx.
    let q_tilde = spd_inverse(&inst.prior_cov) + inst.f.transpose() * &q_inv * &inst.f;
    let p_bar = &inst.q + &inst.f * &inst.prior_cov * inst.f.transpose();
    let lhs = spd_inverse(&p_bar) + &ht_rinv * &inst.h - vxx * mu;
    let rhs = v * mu + &ht_rinv * &inst.innovation;
    let dx2 = solve_dense(&lhs, &rhs)?;
    let eliminated = &x_bar + &dx2;
    let dp = solve_dense(&q_tilde, &(inst.f.transpose() * &q_inv * &dx2))?;
    let x_prev_rec = &inst.prior_mean + dp;

    // Posterior form: -1/2 |dx - mu_hat|^2_{P_t^-1} + value terms.
    let p_t = inst.posterior_cov();
    let p_t_inv = spd_inverse(&p_t);
    let mu_hat = &p_t * &ht_rinv * &inst.innovation;
    let lhs3 = &p_t_inv - vxx * mu;
    let rhs3 = &p_t_inv * &mu_hat + v * mu;
    let reduced = &x_bar + solve_dense(&lhs3, &rhs3)?;

    let scale = x_t.amax().max(x_prev.amax()).max(1.0);
    let max_deviation = [
        (&eliminated - &x_t).amax(),
        (&reduced - &x_t).amax(),
        (&x_prev_rec - &x_prev).amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
        / scale;

    Ok(ReductionReport {
        joint: (x_prev, x_t),
        eliminated,
        reduced,
        max_deviation,
        well_posedness: min_eigenvalue(&lhs3),
    })
}

fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::SolverFailure("singular dense system".into()))
}

/// Backward Riccati recursion for `sum x' Qc x + u' Rc u + x_H' Qf x_H`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// `u_k = K_k x_k`.
    pub gains: Vec<DMatrix<f64>>,
    /// `V_k(x) = x' S_k x`, `k = 0..=H`.
    pub cost_to_go: Vec<DMatrix<f64>>,
}

pub fn riccati_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qc: &DMatrix<f64>,
    rc: &DMatrix<f64>,
    qf: &DMatrix<f64>,
    horizon: usize,
) -> RiccatiSolution {
    let mut s = qf.clone();
    let mut cost_to_go = vec![s.clone()];
    let mut gains = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let bt_s = b.transpose() * &s;
        let g = rc + &bt_s * b;
        let k = -g
            .lu()
            .solve(&(&bt_s * a))
            .expect("Rc + B' S B must be invertible");
        s = symmetrize(&(qc + a.transpose() * &s * a + a.transpose() * &s * b * &k));
        gains.push(k);
        cost_to_go.push(s.clone());
    }
    gains.reverse();
    cost_to_go.reverse();
    RiccatiSolution { gains, cost_to_go }
}

fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `G G' + eps I`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, eps: f64) -> DMatrix<f64> {
    let g = gaussian_matrix(rng, n, n);
    symmetrize(&(&g * g.transpose() + DMatrix::identity(n, n) * eps))
}

/// Symmetric matrix with spectrum drawn uniformly from `[lo, hi]`.
pub fn random_symmetric<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = gaussian_matrix(rng, n, n).qr().q();
    let spectrum = DVector::from_fn(n, |_, _| rng.random_range(lo..=hi));
    symmetrize(&(&q * DMatrix::from_diagonal(&spectrum) * q.transpose()))
}

/// Random admissible instance of dimension `n`; `mu` is drawn below the
/// conservative bound `1 / (lambda_max(P_t) lambda_max(V_xx))`.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, n: usize) -> FilterInstance {
    let m = rng.random_range(1..=n + 1);
    let mut inst = FilterInstance {
        prior_mean: gaussian_vector(rng, n),
        prior_cov: random_spd(rng, n, 0.1),
        f: DMatrix::identity(n, n) + gaussian_matrix(rng, n, n) * 0.3,
        h: gaussian_matrix(rng, m, n),
        q: random_spd(rng, n, 0.1) * 0.5,
        r: random_spd(rng, m, 0.1) * 0.5,
        innovation: gaussian_vector(rng, m),
        mu: 0.0,
        value: ValueQuadratic::zeros(n),
    };
    let v_xx = random_symmetric(rng, n, -1.0, 1.0) * 10f64.powf(rng.random_range(-1.0..1.0));
    let v_x = gaussian_vector(rng, n);
    inst.value = ValueQuadratic {
        anchor: inst.x_bar(),
        v_x,
        v_xx,
    };
    let p_top = max_eigenvalue(&inst.posterior_cov());
    let v_top = max_eigenvalue(&inst.value.v_xx).max(1e-3);
    inst.mu = rng.random_range(0.0..0.9) / (p_top * v_top);
    inst
}

/// Sets `mu` so that `P_t^-1 - mu V_xx` has minimum eigenvalue `target`
/// (bisection). Requires `V_xx` to have a positive eigenvalue.
pub fn tune_mu_to_margin(inst: &mut FilterInstance, target: f64) -> Result<()> {
    let p_inv = spd_inverse(&inst.posterior_cov());
    let margin = |mu: f64| min_eigenvalue(&(&p_inv - &inst.value.v_xx * mu));
    if !(max_eigenvalue(&inst.value.v_xx) > 0.0) || margin(0.0) <= target {
        return Err(Error::validation("V_xx", "needs a positive eigenvalue and a feasible target"));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while margin(hi) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if margin(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    inst.mu = lo;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LqrInstance {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub qc: DMatrix<f64>,
    pub rc: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub horizon: usize,
    pub x0: DVector<f64>,
}

impl LqrInstance {
    pub fn problem(&self) -> OcProblem {
        let n = self.a.nrows();
        let model = LinearModel::new(self.a.clone(), self.b.clone(), DMatrix::identity(n, n), 0.1);
        let cost = QuadraticCost::regulator(self.qc.clone(), self.rc.clone(), self.qf.clone());
        OcProblem::new(Arc::new(model), Arc::new(cost), self.horizon)
    }

    pub fn riccati(&self) -> RiccatiSolution {
        riccati_lqr(&self.a, &self.b, &self.qc, &self.rc, &self.qf, self.horizon)
    }
}

/// Random LQR with `n <= max_n` states and `H <= max_h` stages; `Rc >= I`.
pub fn random_lqr<R: Rng + ?Sized>(rng: &mut R, max_n: usize, max_h: usize) -> LqrInstance {
    let n = rng.random_range(1..=max_n);
    let m = rng.random_range(1..=n);
    let mut a = gaussian_matrix(rng, n, n);
    // Scale to spectral radius ~1 so long horizons stay well conditioned.
    let radius = a.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    a *= rng.random_range(0.5..1.1) / radius.max(1e-6);
    LqrInstance {
        b: gaussian_matrix(rng, n, m),
        qc: random_spd(rng, n, 0.1),
        rc: random_spd(rng, m, 1.0),
        qf: random_spd(rng, n, 0.1),
        horizon: rng.random_range(1..=max_h),
        x0: gaussian_vector(rng, n),
        a,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_instance(mu: f64, v_x: f64, v_xx: f64) -> FilterInstance {
        FilterInstance {
            prior_mean: dvector![0.0],
            prior_cov: scalar(1.0),
            f: scalar(1.0),
            h: scalar(1.0),
            q: scalar(1.0),
            r: scalar(1.0),
            innovation: dvector![0.0],
            mu,
            value: ValueQuadratic {
                anchor: dvector![0.0],
                v_x: dvector![v_x],
                v_xx: scalar(v_xx),
            },
        }
    }

    #[test]
    fn scalar_joint_maximizer() {
        // P_bar = 2, P_t = 2/3, shift = mu P_t v_x = 1/6.
        let (_, x_t) = argmax_joint(&scalar_instance(0.25, 1.0, 0.0)).unwrap();
        assert!((x_t[0] - 1.0 / 6.0).abs() < 1e-14);
    }

    #[test]
    fn zero_mu_gives_kalman_mean() {
        let mut inst = scalar_instance(0.0, 5.0, 3.0);
        inst.innovation = dvector![3.0];
        let (_, x_t) = argmax_joint(&inst).unwrap();
        // K = 2 / 3 on P_bar = 2, R = 1.
        assert!((x_t[0] - 2.0).abs() < 1e-14);
        let rep = verify_reduction(&inst).unwrap();
        assert!(rep.max_deviation < 1e-14);
    }

    #[test]
    fn non_concave_rejected() {
        let inst = scalar_instance(10.0, 1.0, 1.0);
        assert!(matches!(argmax_joint(&inst), Err(Error::IllPosed(_))));
    }

    #[test]
    fn objective_value_is_maximal_at_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&mut rng, 3);
        let obj = joint_objective(&inst);
        let z = obj.argmax().unwrap();
        let best = obj.value(&z);
        for _ in 0..20 {
            let dz = gaussian_vector(&mut rng, z.len()) * 1e-2;
            assert!(obj.value(&(&z + dz)) < best);
        }
    }

    #[test]
    fn one_step_riccati_by_hand() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
        let qc = DMatrix::identity(2, 2);
        let rc = scalar(0.5);
        let qf = DMatrix::from_row_slice(2, 2, &[3.0, 0.2, 0.2, 1.0]);
        let sol = riccati_lqr(&a, &b, &qc, &rc, &qf, 1);
        let g = (&rc + b.transpose() * &qf * &b)[(0, 0)];
        let want = &qc + a.transpose() * &qf * &a
            - a.transpose() * &qf * &b * (1.0 / g) * b.transpose() * &qf * &a;
        assert!((&sol.cost_to_go[0] - want).amax() < 1e-14);
        assert_eq!(sol.cost_to_go[1], qf);
    }

    #[test]
    fn uncoupled_riccati_has_zero_gains() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::zeros(2, 1);
        let sol = riccati_lqr(&a, &b, &a, &scalar(1.0), &a, 5);
        assert!(sol.gains.iter().all(|k| k.amax() == 0.0));
    }

    #[test]
    fn tuned_margin_hits_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inst = random_instance(&mut rng, 3);
        inst.value.v_xx = DMatrix::identity(3, 3);
        tune_mu_to_margin(&mut inst, 1e-6).unwrap();
        let rep = verify_reduction(&inst).unwrap();
        assert!((rep.well_posedness - 1e-6).abs() < 1e-9);
    }
}
