//! Finite-horizon optimal control problems and their second-order cost expansions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::models::{fd_gradient, fd_jacobian, step, SystemModel, EPS_FD};
use crate::{Error, Result};

/// Second-order expansion of a stage or terminal cost. The `u` blocks of a
/// terminal expansion are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub l: f64,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    /// `d2 l / du dx`, shape `(nu, nx)`.
    pub lux: DMatrix<f64>,
}

impl CostExpansion {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            l: 0.0,
            lx: DVector::zeros(nx),
            lu: DVector::zeros(nu),
            lxx: DMatrix::zeros(nx, nx),
            luu: DMatrix::zeros(nu, nu),
            lux: DMatrix::zeros(nu, nx),
        }
    }
}

/// Stage and terminal costs. `t` is the absolute time of the node, so tracking
/// costs can follow a time-indexed reference.
pub trait CostModel: Send + Sync {
    fn stage_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn terminal_cost(&self, t: f64, x: &DVector<f64>) -> f64;

    /// Analytic (or Gauss-Newton) expansion. `None` selects finite differences.
    fn stage_expansion(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<CostExpansion> {
        None
    }

    fn terminal_expansion(&self, _t: f64, _x: &DVector<f64>) -> Option<CostExpansion> {
        None
    }
}

/// Finite-difference expansion of a stage cost (gradient of the cost, then
/// Jacobian of the gradient).
pub fn fd_stage_expansion<C: CostModel + ?Sized>(
    cost: &C,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> CostExpansion {
    let nx = x.len();
    let z = stack(x, u);
    let f = |z: &DVector<f64>| {
        let (x, u) = split(z, nx);
        cost.stage_cost(t, &x, &u)
    };
    let eps = EPS_FD.sqrt() * 1e-1;
    let g = fd_gradient(f, &z, eps);
    let hess = crate::linalg::symmetrize(&fd_jacobian(|z| fd_gradient(f, z, eps), &z, eps));
    let nu = u.len();
    CostExpansion {
        l: cost.stage_cost(t, x, u),
        lx: g.rows(0, nx).into_owned(),
        lu: g.rows(nx, nu).into_owned(),
        lxx: hess.view((0, 0), (nx, nx)).into_owned(),
        luu: hess.view((nx, nx), (nu, nu)).into_owned(),
        lux: hess.view((nx, 0), (nu, nx)).into_owned(),
    }
}

pub fn fd_terminal_expansion<C: CostModel + ?Sized>(
    cost: &C,
    t: f64,
    x: &DVector<f64>,
) -> CostExpansion {
    let f = |z: &DVector<f64>| cost.terminal_cost(t, z);
    let eps = EPS_FD.sqrt() * 1e-1;
    let g = fd_gradient(f, x, eps);
    let hess = crate::linalg::symmetrize(&fd_jacobian(|z| fd_gradient(f, z, eps), x, eps));
    CostExpansion {
        l: cost.terminal_cost(t, x),
        lx: g,
        lxx: hess,
        ..CostExpansion::zeros(x.len(), 0)
    }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

fn split(z: &DVector<f64>, nx: usize) -> (DVector<f64>, DVector<f64>) {
    (z.rows(0, nx).into_owned(), z.rows(nx, z.len() - nx).into_owned())
}

/// A horizon-`H` problem: `H` stage costs at nodes `0..H` and a terminal cost at
/// node `H`. Node `k` sits at absolute time `t0 + k * dt`.
#[derive(Clone)]
pub struct OcProblem {
    pub model: Arc<dyn SystemModel>,
    pub cost: Arc<dyn CostModel>,
    pub horizon: usize,
    pub t0: f64,
}

impl std::fmt::Debug for OcProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcProblem")
            .field("state_dim", &self.model.state_dim())
            .field("control_dim", &self.model.control_dim())
            .field("horizon", &self.horizon)
            .field("t0", &self.t0)
            .finish()
    }
}

impl OcProblem {
    pub fn new(model: Arc<dyn SystemModel>, cost: Arc<dyn CostModel>, horizon: usize) -> Self {
        assert!(horizon >= 1, "horizon must be at least 1");
        Self {
            model,
            cost,
            horizon,
            t0: 0.0,
        }
    }

    /// The same problem with node 0 at time `t0`.
    pub fn at_time(&self, t0: f64) -> Self {
        Self {
            t0,
            ..self.clone()
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    pub fn node_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.model.dt()
    }

    fn check_stage(&self, k: usize) -> Result<()> {
        if k < self.horizon {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: k,
                limit: self.horizon,
            })
        }
    }

    pub fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.check_stage(k)?;
        Ok(self.cost.stage_cost(self.node_time(k), x, u))
    }

    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.cost.terminal_cost(self.node_time(self.horizon), x)
    }

    pub fn expand_stage(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<CostExpansion> {
        self.check_stage(k)?;
        let t = self.node_time(k);
        Ok(self
            .cost
            .stage_expansion(t, x, u)
            .unwrap_or_else(|| fd_stage_expansion(self.cost.as_ref(), t, x, u)))
    }

    pub fn expand_terminal(&self, x: &DVector<f64>) -> CostExpansion {
        let t = self.node_time(self.horizon);
        self.cost
            .terminal_expansion(t, x)
            .unwrap_or_else(|| fd_terminal_expansion(self.cost.as_ref(), t, x))
    }

    /// States `x_0..=x_H` under `controls`.
    pub fn rollout(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if controls.len() != self.horizon {
            return Err(Error::Dimension {
                what: "control sequence",
                expected: self.horizon,
                got: controls.len(),
            });
        }
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(x0.clone());
        for (k, u) in controls.iter().enumerate() {
            let next = step(self.model.as_ref(), &states[k], u).map_err(|_| Error::DivergedRollout(k))?;
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::DivergedRollout(k));
            }
            states.push(next);
        }
        Ok(states)
    }

    /// Cost of a trajectory already rolled out.
    pub fn trajectory_cost(&self, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
        let running: f64 = controls
            .iter()
            .enumerate()
            .map(|(k, u)| self.cost.stage_cost(self.node_time(k), &states[k], u))
            .sum();
        running + self.terminal_cost(&states[self.horizon])
    }

    pub fn total_cost(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<f64> {
        let states = self.rollout(x0, controls)?;
        let c = self.trajectory_cost(&states, controls);
        if c.is_finite() {
            Ok(c)
        } else {
            Err(Error::DivergedRollout(self.horizon))
        }
    }
}

/// `(x - x_ref)' Wx (x - x_ref) + (u - u_ref)' Wu (u - u_ref)`, terminal
/// `(x - x_ref)' Wf (x - x_ref)`. No factor one half.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
    pub wx: DMatrix<f64>,
    pub wu: DMatrix<f64>,
    pub wf: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn regulator(wx: DMatrix<f64>, wu: DMatrix<f64>, wf: DMatrix<f64>) -> Self {
        Self {
            x_ref: DVector::zeros(wx.nrows()),
            u_ref: DVector::zeros(wu.nrows()),
            wx,
            wu,
            wf,
        }
    }
}

impl CostModel for QuadraticCost {
    fn stage_cost(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        dx.dot(&(&self.wx * &dx)) + du.dot(&(&self.wu * &du))
    }

    fn terminal_cost(&self, _t: f64, x: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref;
        dx.dot(&(&self.wf * &dx))
    }

    fn stage_expansion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Option<CostExpansion> {
        let wx = &self.wx + self.wx.transpose();
        let wu = &self.wu + self.wu.transpose();
        Some(CostExpansion {
            l: self.stage_cost(t, x, u),
            lx: &wx * (x - &self.x_ref),
            lu: &wu * (u - &self.u_ref),
            lxx: wx,
            luu: wu,
            lux: DMatrix::zeros(u.len(), x.len()),
        })
    }

    fn terminal_expansion(&self, t: f64, x: &DVector<f64>) -> Option<CostExpansion> {
        let wf = &self.wf + self.wf.transpose();
        Some(CostExpansion {
            l: self.terminal_cost(t, x),
            lx: &wf * (x - &self.x_ref),
            lxx: wf,
            ..CostExpansion::zeros(x.len(), 0)
        })
    }
}

/// Quadratic soft bound: `(u - lo)^2` below `lo`, `(u - hi)^2` above `hi`, zero
/// inside. Returns value, slope and curvature.
pub fn soft_bound(u: f64, lo: f64, hi: f64) -> (f64, f64, f64) {
    if u < lo {
        let d = u - lo;
        (d * d, 2.0 * d, 2.0)
    } else if u > hi {
        let d = u - hi;
        (d * d, 2.0 * d, 2.0)
    } else {
        (0.0, 0.0, 0.0)
    }
}
