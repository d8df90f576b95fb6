//! Discrete-time system and measurement models.
//!
//! A [`SystemModel`] is a pure map `(x, u) -> x'` plus a measurement map `x -> y`.
//! Models may supply analytic Jacobians; anything they leave out falls back to
//! central finite differences with a per-coordinate step of
//! `eps_fd * max(1, |x_i|)`.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{require_finite, require_len, require_spd};
use crate::Result;

/// Default relative finite-difference step.
pub const EPS_FD: f64 = 1e-6;

/// Default tolerance for [`check_jacobians`].
pub const JACOBIAN_TOL: f64 = 1e-5;

pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;
    /// Integration step in seconds.
    fn dt(&self) -> f64;

    /// Discrete transition, e.g. `x + dt * f_cont(x, u)` for Euler-integrated models.
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;

    fn state_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn control_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn observation_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Advances the model one step, rejecting non-finite inputs.
pub fn step<M: SystemModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    require_len(x, model.state_dim(), "state")?;
    require_len(u, model.control_dim(), "control")?;
    require_finite(x, "state")?;
    require_finite(u, "control")?;
    Ok(model.transition(x, u))
}

pub fn measure<M: SystemModel + ?Sized>(model: &M, x: &DVector<f64>) -> Result<DVector<f64>> {
    require_len(x, model.state_dim(), "state")?;
    require_finite(x, "state")?;
    Ok(model.observe(x))
}

/// `F = d transition / dx`.
pub fn dyn_jacobian<M: SystemModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DMatrix<f64> {
    model
        .state_jacobian(x, u)
        .unwrap_or_else(|| fd_jacobian(|z| model.transition(z, u), x, EPS_FD))
}

/// `B = d transition / du`.
pub fn control_jacobian<M: SystemModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> DMatrix<f64> {
    model
        .control_jacobian(x, u)
        .unwrap_or_else(|| fd_jacobian(|v| model.transition(x, v), u, EPS_FD))
}

/// `H = d observe / dx`.
pub fn meas_jacobian<M: SystemModel + ?Sized>(model: &M, x: &DVector<f64>) -> DMatrix<f64> {
    model
        .observation_jacobian(x)
        .unwrap_or_else(|| fd_jacobian(|z| model.observe(z), x, EPS_FD))
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, eps_fd: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut cols = Vec::with_capacity(x.len());
    let mut z = x.clone();
    for i in 0..x.len() {
        let h = eps_fd * x[i].abs().max(1.0);
        z[i] = x[i] + h;
        let fp = f(&z);
        z[i] = x[i] - h;
        let fm = f(&z);
        z[i] = x[i];
        cols.push((fp - fm) / (2.0 * h));
    }
    if cols.is_empty() {
        return DMatrix::zeros(f(x).len(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Gradient of a scalar function by central differences.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, eps_fd: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let j = fd_jacobian(|z| DVector::from_element(1, f(z)), x, eps_fd);
    j.row(0).transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianKind {
    State,
    Control,
    Measurement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianFlag {
    pub kind: JacobianKind,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Analytic-vs-numeric comparison. A `None` error means the model supplies no
/// analytic Jacobian for that block.
#[derive(Debug, Clone, Default)]
pub struct JacobianReport {
    pub state_err: Option<f64>,
    pub control_err: Option<f64>,
    pub meas_err: Option<f64>,
    pub flagged: Vec<JacobianFlag>,
}

impl JacobianReport {
    pub fn max_error(&self) -> f64 {
        [self.state_err, self.control_err, self.meas_err]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

fn compare_block(
    kind: JacobianKind,
    analytic: &DMatrix<f64>,
    numeric: &DMatrix<f64>,
    tol: f64,
    flagged: &mut Vec<JacobianFlag>,
) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "{kind:?} Jacobian shape");
    let mut worst = 0.0_f64;
    for c in 0..analytic.ncols() {
        for r in 0..analytic.nrows() {
            let (a, n) = (analytic[(r, c)], numeric[(r, c)]);
            let err = (a - n).abs() / n.abs().max(1.0);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            worst = worst.max(err);
            if err > tol {
                flagged.push(JacobianFlag {
                    kind,
                    row: r,
                    col: c,
                    analytic: a,
                    numeric: n,
                    rel_err: err,
                });
            }
        }
    }
    worst
}

/// Compares every analytic Jacobian the model provides against central finite
/// differences and flags entries whose relative error exceeds `tol`.
pub fn check_jacobians<M: SystemModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    eps_fd: f64,
    tol: f64,
) -> JacobianReport {
    let mut report = JacobianReport::default();
    if let Some(a) = model.state_jacobian(x, u) {
        let n = fd_jacobian(|z| model.transition(z, u), x, eps_fd);
        report.state_err = Some(compare_block(JacobianKind::State, &a, &n, tol, &mut report.flagged));
    }
    if let Some(a) = model.control_jacobian(x, u) {
        let n = fd_jacobian(|v| model.transition(x, v), u, eps_fd);
        report.control_err =
            Some(compare_block(JacobianKind::Control, &a, &n, tol, &mut report.flagged));
    }
    if let Some(a) = model.observation_jacobian(x) {
        let n = fd_jacobian(|z| model.observe(z), x, eps_fd);
        report.meas_err =
            Some(compare_block(JacobianKind::Measurement, &a, &n, tol, &mut report.flagged));
    }
    report
}

/// Process, measurement and prior covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p0: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, p0: DMatrix<f64>) -> Result<Self> {
        require_spd(&q, "Q")?;
        require_spd(&r, "R")?;
        require_spd(&p0, "P0")?;
        if p0.shape() != q.shape() {
            return Err(crate::Error::Dimension {
                what: "P0",
                expected: q.nrows(),
                got: p0.nrows(),
            });
        }
        Ok(Self { q, r, p0 })
    }

    pub fn from_diagonals(q: &[f64], r: &[f64], p0: &[f64]) -> Result<Self> {
        let d = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        Self::new(d(q), d(r), d(p0))
    }
}

/// `x' = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dt: f64,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, dt: f64) -> Self {
        assert!(a.is_square() && a.nrows() >= 1, "A must be square");
        assert_eq!(b.nrows(), a.nrows(), "B rows");
        assert_eq!(c.ncols(), a.nrows(), "C columns");
        assert!(b.ncols() >= 1 && c.nrows() >= 1 && dt > 0.0);
        Self { a, b, c, dt }
    }

    /// Euler-discretized `x_dot = u` with identity measurement.
    pub fn integrator(n: usize, dt: f64) -> Self {
        Self::new(
            DMatrix::identity(n, n),
            DMatrix::identity(n, n) * dt,
            DMatrix::identity(n, n),
            dt,
        )
    }
}

impl SystemModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn meas_dim(&self) -> usize {
        self.c.nrows()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }
    fn state_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
    fn control_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.b.clone())
    }
    fn observation_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.c.clone())
    }
}
