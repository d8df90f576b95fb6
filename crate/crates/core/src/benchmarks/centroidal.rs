//! Centroidal model of a quadruped standing on four point contacts.
//!
//! State `(c, l, k, F_ext, tau_ext)`: center of mass, linear and angular
//! momentum, and a constant external wrench. Controls are the four contact
//! forces. `(c, l, k)` is measured.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::closed_loop::{DisturbanceEvent, DisturbanceKind, DisturbanceScript, Plant, Scenario};
use crate::ddp::DdpOptions;
use crate::filters::RiskConfig;
use crate::linalg::skew;
use crate::models::{NoiseSpec, SystemModel};
use crate::ocp::{soft_bound, CostExpansion, CostModel, OcProblem};
use crate::{Error, Result};

use super::{compare_estimators, diag, ComparisonReport};

pub const STATE_DIM: usize = 15;
pub const CONTROL_DIM: usize = 12;
pub const MEAS_DIM: usize = 9;
pub const COM: usize = 0;
pub const LIN: usize = 3;
pub const ANG: usize = 6;
pub const FORCE: usize = 9;
pub const TORQUE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentroidalParams {
    pub mass: f64,
    pub gravity: f64,
    pub contacts: [[f64; 3]; 4],
}

impl Default for CentroidalParams {
    fn default() -> Self {
        Self {
            mass: 2.5,
            gravity: 9.81,
            contacts: [
                [0.19, 0.15, 0.0],
                [0.19, -0.15, 0.0],
                [-0.19, 0.15, 0.0],
                [-0.19, -0.15, 0.0],
            ],
        }
    }
}

fn v3(x: &DVector<f64>, at: usize) -> Vector3<f64> {
    Vector3::new(x[at], x[at + 1], x[at + 2])
}

#[derive(Debug, Clone)]
pub struct CentroidalModel {
    pub params: CentroidalParams,
    pub dt: f64,
}

impl CentroidalModel {
    fn contact(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.params.contacts[i])
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let c = v3(x, COM);
        let mut force = Vector3::new(0.0, 0.0, -self.params.mass * self.params.gravity) + v3(x, FORCE);
        let mut torque = v3(x, TORQUE);
        for i in 0..4 {
            let f = v3(u, 3 * i);
            force += f;
            torque += (self.contact(i) - c).cross(&f);
        }
        let mut d = DVector::zeros(STATE_DIM);
        d.rows_mut(COM, 3).copy_from(&(v3(x, LIN) / self.params.mass));
        d.rows_mut(LIN, 3).copy_from(&force);
        d.rows_mut(ANG, 3).copy_from(&torque);
        d
    }

    /// Contact forces sharing the weight equally.
    pub fn standing_forces(&self) -> DVector<f64> {
        let fz = 0.25 * self.params.mass * self.params.gravity;
        DVector::from_fn(CONTROL_DIM, |i, _| if i % 3 == 2 { fz } else { 0.0 })
    }
}

impl SystemModel for CentroidalModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn control_dim(&self) -> usize {
        CONTROL_DIM
    }
    fn meas_dim(&self) -> usize {
        MEAS_DIM
    }
    fn dt(&self) -> f64 {
        self.dt
    }

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        x + self.derivative(x, u) * self.dt
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, MEAS_DIM).into_owned()
    }

    fn state_jacobian(&self, _x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let dt = self.dt;
        let mut f = DMatrix::identity(STATE_DIM, STATE_DIM);
        let sum_f = (0..4).fold(Vector3::zeros(), |s, i| s + v3(u, 3 * i));
        for a in 0..3 {
            f[(COM + a, LIN + a)] = dt / self.params.mass;
            f[(LIN + a, FORCE + a)] = dt;
            f[(ANG + a, TORQUE + a)] = dt;
        }
        f.view_mut((ANG, COM), (3, 3)).copy_from(&(skew(sum_f.as_slice()) * dt));
        Some(f)
    }

    fn control_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let c = v3(x, COM);
        let mut b = DMatrix::zeros(STATE_DIM, CONTROL_DIM);
        for i in 0..4 {
            for a in 0..3 {
                b[(LIN + a, 3 * i + a)] = self.dt;
            }
            b.view_mut((ANG, 3 * i), (3, 3))
                .copy_from(&(skew((self.contact(i) - c).as_slice()) * self.dt));
        }
        Some(b)
    }

    fn observation_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(MEAS_DIM, STATE_DIM);
        h.view_mut((0, 0), (MEAS_DIM, MEAS_DIM)).fill_with_identity();
        Some(h)
    }
}

/// The true robot: its external wrench is whatever the script applies.
#[derive(Debug, Clone)]
pub struct CentroidalPlant {
    pub model: CentroidalModel,
}

impl Plant for CentroidalPlant {
    fn advance(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, script: &DisturbanceScript) -> DVector<f64> {
        let mut wrench = DVector::<f64>::zeros(6);
        for e in script.active(DisturbanceKind::ExternalForce, t) {
            for (w, m) in wrench.iter_mut().zip(&e.magnitude) {
                *w += m;
            }
        }
        let mut x = x.clone();
        x.rows_mut(FORCE, 6).copy_from(&wrench);
        self.model.transition(&x, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentroidalWeights {
    pub com: f64,
    pub momentum: f64,
    pub force_tangential: f64,
    pub force_normal: f64,
    pub barrier: f64,
    pub normal_force_min: f64,
    pub normal_force_max: f64,
}

impl Default for CentroidalWeights {
    fn default() -> Self {
        Self {
            com: 1e2,
            momentum: 10.0,
            force_tangential: 1e-4,
            force_normal: 1e-6,
            barrier: 1e5,
            normal_force_min: 0.0,
            normal_force_max: 10.0,
        }
    }
}

/// Quadratic regulation of `(c, l, k)` and of the forces around the standing
/// forces, plus a quadratic penalty on normal forces leaving their bounds.
/// The terminal cost keeps the state terms.
#[derive(Debug, Clone)]
pub struct CentroidalCost {
    pub weights: CentroidalWeights,
    pub x_star: DVector<f64>,
    pub u_star: DVector<f64>,
}

impl CentroidalCost {
    fn state_weights(&self) -> DVector<f64> {
        DVector::from_fn(STATE_DIM, |i, _| match i {
            0..=2 => self.weights.com,
            3..=8 => self.weights.momentum,
            _ => 0.0,
        })
    }

    fn control_weights(&self) -> DVector<f64> {
        DVector::from_fn(CONTROL_DIM, |i, _| {
            if i % 3 == 2 {
                self.weights.force_normal
            } else {
                self.weights.force_tangential
            }
        })
    }

    fn state_terms(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.x_star;
        d.component_mul(&d).dot(&self.state_weights())
    }

    fn barrier(&self, u: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
        let w = &self.weights;
        let mut value = 0.0;
        let mut grad = DVector::zeros(CONTROL_DIM);
        let mut curv = DVector::zeros(CONTROL_DIM);
        for i in 0..4 {
            let (v, g, h) = soft_bound(u[3 * i + 2], w.normal_force_min, w.normal_force_max);
            value += w.barrier * v;
            grad[3 * i + 2] = w.barrier * g;
            curv[3 * i + 2] = w.barrier * h;
        }
        (value, grad, curv)
    }
}

impl CostModel for CentroidalCost {
    fn stage_cost(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let du = u - &self.u_star;
        self.state_terms(x) + du.component_mul(&du).dot(&self.control_weights()) + self.barrier(u).0
    }

    fn terminal_cost(&self, _t: f64, x: &DVector<f64>) -> f64 {
        self.state_terms(x)
    }

    fn stage_expansion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Option<CostExpansion> {
        let wx = self.state_weights() * 2.0;
        let wu = self.control_weights() * 2.0;
        let (_, bg, bh) = self.barrier(u);
        Some(CostExpansion {
            l: self.stage_cost(t, x, u),
            lx: (x - &self.x_star).component_mul(&wx),
            lu: (u - &self.u_star).component_mul(&wu) + bg,
            lxx: DMatrix::from_diagonal(&wx),
            luu: DMatrix::from_diagonal(&(wu + bh)),
            lux: DMatrix::zeros(CONTROL_DIM, STATE_DIM),
        })
    }

    fn terminal_expansion(&self, t: f64, x: &DVector<f64>) -> Option<CostExpansion> {
        let wx = self.state_weights() * 2.0;
        Some(CostExpansion {
            l: self.terminal_cost(t, x),
            lx: (x - &self.x_star).component_mul(&wx),
            lxx: DMatrix::from_diagonal(&wx),
            ..CostExpansion::zeros(STATE_DIM, 0)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CentroidalSetup {
    pub params: CentroidalParams,
    pub weights: CentroidalWeights,
    pub com_target: [f64; 3],
    /// Filter and plant step (s).
    pub dt: f64,
    pub ocp_dt: f64,
    pub horizon: usize,
    pub mpc_every: usize,
    pub duration: f64,
    /// Error in the prior of the vertical external force (N).
    pub prior_force_z: f64,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub p0_diag: Vec<f64>,
    pub plant_process_diag: Vec<f64>,
    pub mu: f64,
}

fn blocks(parts: &[(usize, f64)]) -> Vec<f64> {
    parts.iter().flat_map(|&(n, v)| std::iter::repeat_n(v, n)).collect()
}

impl Default for CentroidalSetup {
    fn default() -> Self {
        let filter = blocks(&[(6, 1e-3), (3, 1e-4), (3, 1e-1), (3, 1e-2)]);
        Self {
            params: CentroidalParams::default(),
            weights: CentroidalWeights::default(),
            com_target: [0.0, 0.0, 0.2],
            dt: 0.005,
            ocp_dt: 0.01,
            horizon: 40,
            mpc_every: 2,
            duration: 2.0,
            prior_force_z: 20.0,
            q_diag: filter.clone(),
            r_diag: blocks(&[(3, 1e-4), (3, 1e-2), (3, 1e-4)]),
            p0_diag: filter,
            plant_process_diag: blocks(&[(9, 1e-8), (6, 0.0)]),
            mu: 1e-2,
        }
    }
}

impl CentroidalSetup {
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn x_star(&self) -> DVector<f64> {
        let mut x = DVector::zeros(STATE_DIM);
        x.rows_mut(COM, 3).copy_from_slice(&self.com_target);
        x
    }

    pub fn script(&self) -> DisturbanceScript {
        let mut offset = vec![0.0; STATE_DIM];
        offset[FORCE + 2] = self.prior_force_z;
        DisturbanceScript::new(vec![DisturbanceEvent {
            start: 0.0,
            end: self.dt,
            kind: DisturbanceKind::PriorOffset,
            magnitude: offset,
        }])
    }

    pub fn scenario(&self, ddp: DdpOptions) -> Result<Scenario> {
        for (name, v) in [
            ("centroidal.mass", self.params.mass),
            ("centroidal.dt", self.dt),
            ("centroidal.ocp_dt", self.ocp_dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        let filter = Arc::new(CentroidalModel {
            params: self.params,
            dt: self.dt,
        });
        let planner = Arc::new(CentroidalModel {
            params: self.params,
            dt: self.ocp_dt,
        });
        let cost = CentroidalCost {
            weights: self.weights,
            x_star: self.x_star(),
            u_star: filter.standing_forces(),
        };
        let noise = NoiseSpec::from_diagonals(&self.q_diag, &self.r_diag, &self.p0_diag)?;
        let standing = filter.standing_forces();
        Ok(Scenario {
            plant: Arc::new(CentroidalPlant { model: (*filter).clone() }),
            filter_model: filter,
            plant_meas_cov: noise.r.clone(),
            noise,
            plant_process_cov: diag(&self.plant_process_diag),
            ocp: OcProblem::new(planner, Arc::new(cost), self.horizon),
            x0: self.x_star(),
            prior_mean: self.x_star(),
            mpc_every: self.mpc_every,
            ddp,
            tracked: Arc::new(|_, x: &DVector<f64>| x.rows(COM, 3).into_owned()),
            control_limits: None,
            initial_control: Some(standing),
        })
    }

    pub fn reference(&self) -> Vec<DVector<f64>> {
        vec![DVector::from_column_slice(&self.com_target); self.steps()]
    }
}

/// Standing still with a wrong prior on the external force.
pub fn run_wrongprior_study(setup: &CentroidalSetup, ddp: DdpOptions, seed: u64) -> Result<ComparisonReport> {
    let script = setup.script();
    let scenario = setup.scenario(ddp)?;
    let risk = RiskConfig::new(setup.mu)?;
    compare_estimators(&scenario, &risk, &script, setup.steps(), seed, &setup.reference(), 0)
}
