//! Extended Kalman filter and its risk-sensitive variant.
//!
//! The risk-sensitive update runs the ordinary EKF correction to get `P_t` and the
//! innovation shift `mu_hat = K (y - h(x_bar))`, then moves the mean to the
//! maximizer of
//!
//! ```text
//! -1/2 (x - x_bar - mu_hat)' P^-1 (x - x_bar - mu_hat)
//!     + mu/2 (x - x_bar)' V_xx (x - x_bar) + mu (x - x_bar)' v_x
//! ```
//!
//! i.e. `x_rs = x_bar + (I - mu P V_xx)^-1 (mu_hat + mu P v_x)`. The covariance is
//! left as the EKF's `P_t`. The maximizer exists only while `P^-1 - mu V_xx` is
//! positive-definite; past that point the update reports
//! [`Error::RiskLimitExceeded`].

use nalgebra::{DMatrix, DVector};

use crate::ddp::ValueQuadratic;
use crate::linalg::{min_eigenvalue, require_finite, require_len, sym_condition, symmetrize};
use crate::models::{dyn_jacobian, meas_jacobian, SystemModel};
use crate::{Error, Result};

/// Above this condition number of `P_bar` the covariance update switches to the
/// Joseph form.
pub const JOSEPH_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        require_finite(&mean, "belief mean")?;
        require_len(&mean, cov.nrows(), "belief covariance")?;
        crate::linalg::require_spd(&cov, "belief covariance")?;
        Ok(Self { mean, cov })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    pub mu: f64,
    /// Smallest admissible eigenvalue of `P^-1 - mu V_xx`.
    pub pd_margin: f64,
}

impl RiskConfig {
    pub const DEFAULT_PD_MARGIN: f64 = 1e-9;

    pub fn new(mu: f64) -> Result<Self> {
        Self::with_margin(mu, Self::DEFAULT_PD_MARGIN)
    }

    pub fn with_margin(mu: f64, pd_margin: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::validation("mu", format!("must be finite and >= 0, got {mu}")));
        }
        if !(pd_margin > 0.0) {
            return Err(Error::validation("pd_margin", "must be > 0"));
        }
        Ok(Self { mu, pd_margin })
    }
}

/// `x_bar = f(x_hat, u)`, `P_bar = Q + F P F'`.
pub fn predict<M: SystemModel + ?Sized>(
    belief: &GaussianBelief,
    model: &M,
    u: &DVector<f64>,
    q: &DMatrix<f64>,
) -> Result<Prediction> {
    let f = dyn_jacobian(model, &belief.mean, u);
    let mean = crate::models::step(model, &belief.mean, u)?;
    let cov = symmetrize(&(q + &f * &belief.cov * f.transpose()));
    require_finite(&mean, "predicted mean")?;
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("predicted covariance"));
    }
    Ok(Prediction { mean, cov })
}

/// EKF correction. Returns the posterior and the innovation shift `mu_hat`
/// separately so the risk-sensitive update can reuse it.
pub fn update_ekf<M: SystemModel + ?Sized>(
    pred: &Prediction,
    model: &M,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Result<(GaussianBelief, DVector<f64>)> {
    require_len(y, model.meas_dim(), "measurement")?;
    let h = meas_jacobian(model, &pred.mean);
    let innovation = y - model.observe(&pred.mean);
    let h_pbar = &h * &pred.cov;
    let s = symmetrize(&(r + &h_pbar * h.transpose()));
    let chol = s.clone().cholesky().ok_or(Error::InnovationFactorization)?;
    // K = P_bar H' S^-1 = (S^-1 H P_bar)'
    let gain = chol.solve(&h_pbar).transpose();

    let n = pred.mean.len();
    let i_kh = DMatrix::identity(n, n) - &gain * &h;
    let cov = if sym_condition(&pred.cov) > JOSEPH_CONDITION {
        &i_kh * &pred.cov * i_kh.transpose() + &gain * r * gain.transpose()
    } else {
        &i_kh * &pred.cov
    };
    let cov = symmetrize(&cov);
    let shift = &gain * innovation;
    let mean = &pred.mean + &shift;
    require_finite(&mean, "posterior mean")?;
    Ok((GaussianBelief { mean, cov }, shift))
}

/// Moves the expansion point of a quadratic value model to `x_bar`:
/// `v_x' = v_x + V_xx (x_bar - anchor)`.
pub fn reanchor_value(vq: &ValueQuadratic, x_bar: &DVector<f64>) -> ValueQuadratic {
    ValueQuadratic {
        anchor: x_bar.clone(),
        v_x: &vq.v_x + &vq.v_xx * (x_bar - &vq.anchor),
        v_xx: vq.v_xx.clone(),
    }
}

/// Full output of a risk-sensitive step.
#[derive(Debug, Clone, PartialEq)]
pub struct RsUpdate {
    /// Biased mean with the EKF covariance.
    pub belief: GaussianBelief,
    pub ekf_mean: DVector<f64>,
    pub innovation_shift: DVector<f64>,
    /// Minimum eigenvalue of `P^-1 - mu V_xx`.
    pub well_posedness: f64,
}

/// Smallest eigenvalue of `P^-1 - mu V_xx`.
pub fn well_posedness(cov: &DMatrix<f64>, mu: f64, v_xx: &DMatrix<f64>) -> Result<f64> {
    let info = cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("posterior covariance"))?
        .inverse();
    Ok(min_eigenvalue(&(info - v_xx * mu)))
}

pub fn update_rs<M: SystemModel + ?Sized>(
    pred: &Prediction,
    model: &M,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    risk: &RiskConfig,
    vq: &ValueQuadratic,
) -> Result<GaussianBelief> {
    update_rs_detailed(pred, model, y, r, risk, vq).map(|u| u.belief)
}

pub fn update_rs_detailed<M: SystemModel + ?Sized>(
    pred: &Prediction,
    model: &M,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    risk: &RiskConfig,
    vq: &ValueQuadratic,
) -> Result<RsUpdate> {
    let n = pred.mean.len();
    require_len(&vq.anchor, n, "value expansion")?;
    let gap = (&vq.anchor - &pred.mean).amax();
    if gap > 1e-9 * pred.mean.amax().max(1.0) {
        return Err(Error::validation(
            "value expansion anchor",
            format!("must equal the predicted mean (off by {gap:e}); re-anchor first"),
        ));
    }

    let (ekf, shift) = update_ekf(pred, model, y, r)?;
    let p = &ekf.cov;
    let margin = well_posedness(p, risk.mu, &vq.v_xx)?;
    if !(margin > risk.pd_margin) {
        return Err(Error::RiskLimitExceeded {
            mu: risk.mu,
            min_eigenvalue: margin,
            margin: risk.pd_margin,
        });
    }

    let system = DMatrix::identity(n, n) - p * &vq.v_xx * risk.mu;
    let rhs = &shift + p * &vq.v_x * risk.mu;
    let offset = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::NotPositiveDefinite("I - mu P V_xx"))?;
    let mean = &pred.mean + offset;
    require_finite(&mean, "risk-sensitive mean")?;

    Ok(RsUpdate {
        belief: GaussianBelief {
            mean,
            cov: ekf.cov,
        },
        ekf_mean: ekf.mean,
        innovation_shift: shift,
        well_posedness: margin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearModel;
    use nalgebra::dvector;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn unit_model(n: usize) -> LinearModel {
        LinearModel::new(
            DMatrix::identity(n, n),
            DMatrix::zeros(n, 1),
            DMatrix::identity(n, n),
            0.1,
        )
    }

    fn pred(mean: DVector<f64>, cov: DMatrix<f64>) -> Prediction {
        Prediction { mean, cov }
    }

    fn value(anchor: DVector<f64>, v_x: DVector<f64>, v_xx: DMatrix<f64>) -> ValueQuadratic {
        ValueQuadratic { anchor, v_x, v_xx }
    }

    #[test]
    fn predict_identity_doubles_covariance() {
        let m = unit_model(3);
        let b = GaussianBelief::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let p = predict(&b, &m, &dvector![0.0], &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(p.cov, DMatrix::identity(3, 3) * 2.0);
    }

    #[test]
    fn predict_static_model_small_q() {
        let m = unit_model(2);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = GaussianBelief::new(dvector![1.0, -1.0], cov.clone()).unwrap();
        let p = predict(&b, &m, &dvector![0.0], &(DMatrix::identity(2, 2) * 1e-12)).unwrap();
        assert!((p.cov - cov).amax() < 1e-11);
        assert_eq!(p.mean, dvector![1.0, -1.0]);
    }

    #[test]
    fn ekf_identity_update() {
        let m = unit_model(2);
        let p = pred(dvector![0.0, 0.0], DMatrix::identity(2, 2));
        let (b, _) = update_ekf(&p, &m, &dvector![0.0, 0.0], &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(b.cov, DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn ekf_zero_innovation() {
        let m = unit_model(2);
        let p = pred(dvector![0.4, 0.2], DMatrix::identity(2, 2) * 3.0);
        let (b, shift) = update_ekf(&p, &m, &dvector![0.4, 0.2], &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(shift, DVector::zeros(2));
        assert_eq!(b.mean, p.mean);
    }

    #[test]
    fn ekf_scalar_hand_evaluation() {
        let m = unit_model(1);
        let p = pred(dvector![3.0], scalar(1.0));
        let (b, _) = update_ekf(&p, &m, &dvector![5.0], &scalar(1.0)).unwrap();
        assert_eq!(b.mean[0], 4.0);
        assert_eq!(b.cov[(0, 0)], 0.5);
    }

    #[test]
    fn joseph_form_used_on_ill_conditioned_prediction() {
        let m = unit_model(2);
        let p = pred(dvector![0.0, 0.0], DMatrix::from_diagonal(&dvector![1e-6, 1e4]));
        let r = DMatrix::identity(2, 2) * 1e-2;
        let (b, _) = update_ekf(&p, &m, &dvector![0.1, 0.1], &r).unwrap();
        // Information form for a diagonal problem.
        let want = [1.0 / (1e6 + 1e2), 1.0 / (1e-4 + 1e2)];
        for i in 0..2 {
            assert!((b.cov[(i, i)] - want[i]).abs() < 1e-12 * want[i].max(1e-6) * 1e3);
        }
    }

    #[test]
    fn singular_innovation_covariance_fails() {
        let m = unit_model(1);
        let p = pred(dvector![0.0], scalar(0.0));
        assert!(matches!(
            update_ekf(&p, &m, &dvector![1.0], &scalar(0.0)),
            Err(Error::InnovationFactorization)
        ));
    }

    #[test]
    fn reanchor_cases() {
        let vq = value(dvector![1.0], dvector![1.0], scalar(2.0));
        assert_eq!(reanchor_value(&vq, &dvector![1.0]), vq);
        let moved = reanchor_value(&vq, &dvector![1.5]);
        assert_eq!(moved.v_x[0], 2.0);
        assert_eq!(moved.anchor[0], 1.5);
    }

    #[test]
    fn reanchored_gradient_is_exact_for_quadratics() {
        // V(x) = 1/2 x' A x + b' x
        let a = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, -0.5, 1.0]);
        let bvec = dvector![0.3, -1.0];
        let grad = |x: &DVector<f64>| &a * x + &bvec;
        let x0 = dvector![0.2, 0.7];
        let vq = value(x0.clone(), grad(&x0), a.clone());
        let x1 = dvector![-1.3, 2.1];
        let moved = reanchor_value(&vq, &x1);
        assert!((moved.v_x - grad(&x1)).amax() < 1e-14);
    }

    #[test]
    fn zero_mu_recovers_ekf() {
        let m = unit_model(1);
        let p = pred(dvector![0.5], scalar(2.0));
        let vq = value(dvector![0.5], dvector![3.0], scalar(-1.0));
        let rs = update_rs(&p, &m, &dvector![1.0], &scalar(1.0), &RiskConfig::new(0.0).unwrap(), &vq).unwrap();
        let (ekf, _) = update_ekf(&p, &m, &dvector![1.0], &scalar(1.0)).unwrap();
        assert_eq!(rs, ekf);
    }

    #[test]
    fn scalar_risk_shift_by_hand() {
        // P_bar = 2, R = 2 gives P = 1; zero innovation.
        let m = unit_model(1);
        let p = pred(dvector![0.0], scalar(2.0));
        let vq = value(dvector![0.0], dvector![1.0], scalar(1.0));
        let risk = RiskConfig::new(0.5).unwrap();
        let b = update_rs(&p, &m, &dvector![0.0], &scalar(2.0), &risk, &vq).unwrap();
        assert!((b.mean[0] - 1.0).abs() < 1e-15);
        assert_eq!(b.cov[(0, 0)], 1.0);
    }

    #[test]
    fn flat_value_gives_ekf_estimate() {
        let m = unit_model(2);
        let p = pred(dvector![0.1, 0.2], DMatrix::identity(2, 2));
        let vq = ValueQuadratic {
            anchor: p.mean.clone(),
            ..ValueQuadratic::zeros(2)
        };
        let y = dvector![0.5, -0.5];
        let r = DMatrix::identity(2, 2);
        let (ekf, _) = update_ekf(&p, &m, &y, &r).unwrap();
        for mu in [0.0, 0.3, 10.0, 1e6] {
            let rs = update_rs(&p, &m, &y, &r, &RiskConfig::new(mu).unwrap(), &vq).unwrap();
            assert!((rs.mean - &ekf.mean).amax() < 1e-15);
        }
    }

    #[test]
    fn risk_limit_detected() {
        let m = unit_model(1);
        let p = pred(dvector![0.0], scalar(2.0));
        let vq = value(dvector![0.0], dvector![1.0], scalar(1.0));
        let margin = RiskConfig::DEFAULT_PD_MARGIN;
        for mu in [1.0 - margin, 1.0, 2.0] {
            let risk = RiskConfig::new(mu).unwrap();
            assert!(matches!(
                update_rs(&p, &m, &dvector![0.0], &scalar(2.0), &risk, &vq),
                Err(Error::RiskLimitExceeded { .. })
            ));
        }
        let ok = RiskConfig::new(1.0 - 1e-3).unwrap();
        assert!(update_rs(&p, &m, &dvector![0.0], &scalar(2.0), &ok, &vq).is_ok());
    }

    #[test]
    fn unanchored_value_rejected() {
        let m = unit_model(1);
        let p = pred(dvector![0.0], scalar(1.0));
        let vq = value(dvector![1.0], dvector![1.0], scalar(0.0));
        let risk = RiskConfig::new(0.1).unwrap();
        assert!(update_rs(&p, &m, &dvector![0.0], &scalar(1.0), &risk, &vq).is_err());
    }

    #[test]
    fn negative_mu_rejected() {
        assert!(RiskConfig::new(-1.0).is_err());
        assert!(RiskConfig::new(f64::NAN).is_err());
    }
}
