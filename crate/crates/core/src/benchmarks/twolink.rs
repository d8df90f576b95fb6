//! Two-link arm in a vertical plane tracking an end-effector circle.
//!
//! State `(q1, q2, dq1, dq2)`, joint torques as controls, full-state
//! measurements. Links are uniform rods; gravity acts along `-y`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed_loop::{DisturbanceEvent, DisturbanceKind, DisturbanceScript, Plant, Scenario};
use crate::ddp::DdpOptions;
use crate::filters::RiskConfig;
use crate::models::{NoiseSpec, SystemModel};
use crate::ocp::{CostExpansion, CostModel, OcProblem};
use crate::{Error, Result};

use super::{compare_estimators, diag, ComparisonReport};

pub const STATE_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub gravity: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            l1: 0.5,
            l2: 0.5,
            gravity: 9.81,
        }
    }
}

impl ArmParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("arm.m1", self.m1),
            ("arm.m2", self.m2),
            ("arm.l1", self.l1),
            ("arm.l2", self.l2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if !(self.gravity >= 0.0) {
            return Err(Error::validation("arm.gravity", "must be >= 0"));
        }
        Ok(())
    }

    pub fn mass_matrix(&self, q2: f64) -> Matrix2<f64> {
        let (lc1, lc2) = (0.5 * self.l1, 0.5 * self.l2);
        let i1 = self.m1 * self.l1 * self.l1 / 12.0;
        let i2 = self.m2 * self.l2 * self.l2 / 12.0;
        let c2 = q2.cos();
        let m22 = i2 + self.m2 * lc2 * lc2;
        let m12 = m22 + self.m2 * self.l1 * lc2 * c2;
        let m11 = i1 + self.m1 * lc1 * lc1 + m22 + self.m2 * (self.l1 * self.l1 + 2.0 * self.l1 * lc2 * c2);
        Matrix2::new(m11, m12, m12, m22)
    }

    /// Coriolis and centrifugal torques `C(q, dq) dq`.
    pub fn coriolis(&self, q2: f64, dq: Vector2<f64>) -> Vector2<f64> {
        let h = self.m2 * self.l1 * 0.5 * self.l2 * q2.sin();
        Vector2::new(-h * dq[1] * (2.0 * dq[0] + dq[1]), h * dq[0] * dq[0])
    }

    fn gravity_coeffs(&self) -> (f64, f64) {
        let a = (0.5 * self.m1 + self.m2) * self.l1 * self.gravity;
        let b = 0.5 * self.m2 * self.l2 * self.gravity;
        (a, b)
    }

    pub fn gravity_torque(&self, q: Vector2<f64>) -> Vector2<f64> {
        let (a, b) = self.gravity_coeffs();
        let c12 = (q[0] + q[1]).cos();
        Vector2::new(a * q[0].cos() + b * c12, b * c12)
    }

    pub fn gravity_torque_jacobian(&self, q: Vector2<f64>) -> Matrix2<f64> {
        let (a, b) = self.gravity_coeffs();
        let s12 = (q[0] + q[1]).sin();
        Matrix2::new(-a * q[0].sin() - b * s12, -b * s12, -b * s12, -b * s12)
    }

    pub fn forward_kinematics(&self, q: Vector2<f64>) -> Vector2<f64> {
        let q12 = q[0] + q[1];
        Vector2::new(
            self.l1 * q[0].cos() + self.l2 * q12.cos(),
            self.l1 * q[0].sin() + self.l2 * q12.sin(),
        )
    }

    pub fn ee_jacobian(&self, q: Vector2<f64>) -> Matrix2<f64> {
        let (s1, c1) = q[0].sin_cos();
        let (s12, c12) = (q[0] + q[1]).sin_cos();
        Matrix2::new(
            -self.l1 * s1 - self.l2 * s12,
            -self.l2 * s12,
            self.l1 * c1 + self.l2 * c12,
            self.l2 * c12,
        )
    }

    /// Elbow-down inverse kinematics; `None` outside the workspace.
    pub fn inverse_kinematics(&self, p: Vector2<f64>) -> Option<Vector2<f64>> {
        let c2 = (p.norm_squared() - self.l1 * self.l1 - self.l2 * self.l2) / (2.0 * self.l1 * self.l2);
        if !(-1.0..=1.0).contains(&c2) {
            return None;
        }
        let q2 = -c2.acos();
        let q1 = p[1].atan2(p[0]) - (self.l2 * q2.sin()).atan2(self.l1 + self.l2 * q2.cos());
        Some(Vector2::new(q1, q2))
    }

    pub fn acceleration(&self, x: &DVector<f64>, tau: Vector2<f64>) -> Vector2<f64> {
        let q = Vector2::new(x[0], x[1]);
        let dq = Vector2::new(x[2], x[3]);
        let rhs = tau - self.coriolis(q[1], dq) - self.gravity_torque(q);
        self.mass_matrix(q[1]).lu().solve(&rhs).unwrap_or_else(Vector2::zeros)
    }

    /// Kinetic plus potential energy, zero when hanging straight down at rest.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let dq = Vector2::new(x[2], x[3]);
        let kinetic = 0.5 * dq.dot(&(self.mass_matrix(x[1]) * dq));
        let (s1, s12) = (x[0].sin(), (x[0] + x[1]).sin());
        let g = self.gravity;
        let lowest = 0.5 * self.m1 * self.l1 + self.m2 * (self.l1 + 0.5 * self.l2);
        let height = 0.5 * self.m1 * self.l1 * s1 + self.m2 * (self.l1 * s1 + 0.5 * self.l2 * s12);
        kinetic + g * (height + lowest)
    }
}

/// Semi-implicit Euler arm. Jacobians come from finite differences.
#[derive(Debug, Clone)]
pub struct ArmModel {
    pub params: ArmParams,
    pub dt: f64,
}

impl ArmModel {
    fn step_with(&self, x: &DVector<f64>, tau: Vector2<f64>) -> DVector<f64> {
        let acc = self.params.acceleration(x, tau);
        let dt = self.dt;
        let (v1, v2) = (x[2] + dt * acc[0], x[3] + dt * acc[1]);
        dvector![x[0] + dt * v1, x[1] + dt * v2, v1, v2]
    }
}

impl SystemModel for ArmModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn meas_dim(&self) -> usize {
        STATE_DIM
    }
    fn dt(&self) -> f64 {
        self.dt
    }

    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.step_with(x, Vector2::new(u[0], u[1]))
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn observation_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(STATE_DIM, STATE_DIM))
    }
}

/// The arm plus external end-effector forces from the script.
#[derive(Debug, Clone)]
pub struct ArmPlant {
    pub model: ArmModel,
}

impl Plant for ArmPlant {
    fn advance(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, script: &DisturbanceScript) -> DVector<f64> {
        let force = script
            .active(DisturbanceKind::ExternalForce, t)
            .fold(Vector2::zeros(), |f, e| f + Vector2::new(e.magnitude[0], e.magnitude[1]));
        let q = Vector2::new(x[0], x[1]);
        let tau = Vector2::new(u[0], u[1]) + self.model.params.ee_jacobian(q).transpose() * force;
        self.model.step_with(x, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
    pub period: f64,
}

impl Default for Circle {
    fn default() -> Self {
        Self {
            center: [0.5, -0.4],
            radius: 0.1,
            period: 2.0,
        }
    }
}

impl Circle {
    pub fn at(&self, t: f64) -> Vector2<f64> {
        let a = 2.0 * PI * t / self.period;
        Vector2::new(self.center[0] + self.radius * a.cos(), self.center[1] + self.radius * a.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmWeights {
    pub state: f64,
    pub gravity_compensation: f64,
    pub end_effector: f64,
}

impl Default for ArmWeights {
    fn default() -> Self {
        Self {
            state: 1e-2,
            gravity_compensation: 1e-4,
            end_effector: 1e2,
        }
    }
}

/// Sum of squared residuals: state regularization, torque minus gravity
/// compensation, end-effector tracking error. The terminal cost drops the
/// torque residual. Hessians use the Gauss-Newton approximation.
#[derive(Debug, Clone)]
pub struct ArmCost {
    pub params: ArmParams,
    pub weights: ArmWeights,
    pub circle: Circle,
    pub x_reg: DVector<f64>,
}

impl ArmCost {
    fn ee_error(&self, t: f64, x: &DVector<f64>) -> Vector2<f64> {
        self.params.forward_kinematics(Vector2::new(x[0], x[1])) - self.circle.at(t)
    }

    fn torque_residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vector2<f64> {
        Vector2::new(u[0], u[1]) - self.params.gravity_torque(Vector2::new(x[0], x[1]))
    }

    fn state_terms(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.weights.state * (x - &self.x_reg).norm_squared() + self.weights.end_effector * self.ee_error(t, x).norm_squared()
    }

    fn state_expansion(&self, t: f64, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let w = &self.weights;
        let q = Vector2::new(x[0], x[1]);
        let j = self.params.ee_jacobian(q);
        let g = j.transpose() * self.ee_error(t, x) * (2.0 * w.end_effector);
        let h = j.transpose() * j * (2.0 * w.end_effector);
        let mut lx = (x - &self.x_reg) * (2.0 * w.state);
        let mut lxx = DMatrix::identity(STATE_DIM, STATE_DIM) * (2.0 * w.state);
        for a in 0..2 {
            lx[a] += g[a];
            for b in 0..2 {
                lxx[(a, b)] += h[(a, b)];
            }
        }
        (lx, lxx)
    }
}

impl CostModel for ArmCost {
    fn stage_cost(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.state_terms(t, x) + self.weights.gravity_compensation * self.torque_residual(x, u).norm_squared()
    }

    fn terminal_cost(&self, t: f64, x: &DVector<f64>) -> f64 {
        self.state_terms(t, x)
    }

    fn stage_expansion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Option<CostExpansion> {
        let wg = self.weights.gravity_compensation;
        let r = self.torque_residual(x, u);
        let gq = self.params.gravity_torque_jacobian(Vector2::new(x[0], x[1]));
        let (mut lx, mut lxx) = self.state_expansion(t, x);
        let gx = -gq.transpose() * r * (2.0 * wg);
        let hxx = gq.transpose() * gq * (2.0 * wg);
        let mut lux = DMatrix::zeros(2, STATE_DIM);
        for a in 0..2 {
            lx[a] += gx[a];
            for b in 0..2 {
                lxx[(a, b)] += hxx[(a, b)];
                lux[(a, b)] = -2.0 * wg * gq[(a, b)];
            }
        }
        Some(CostExpansion {
            l: self.stage_cost(t, x, u),
            lx,
            lu: DVector::from_column_slice((r * (2.0 * wg)).as_slice()),
            lxx,
            luu: DMatrix::identity(2, 2) * (2.0 * wg),
            lux,
        })
    }

    fn terminal_expansion(&self, t: f64, x: &DVector<f64>) -> Option<CostExpansion> {
        let (lx, lxx) = self.state_expansion(t, x);
        Some(CostExpansion {
            l: self.terminal_cost(t, x),
            lx,
            lxx,
            ..CostExpansion::zeros(STATE_DIM, 0)
        })
    }
}

/// A push of fixed force norm applied at the end effector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PushSpec {
    pub force: f64,
    pub duration: f64,
    pub onset_min: f64,
    pub onset_max: f64,
}

impl Default for PushSpec {
    fn default() -> Self {
        Self {
            force: 30.0,
            duration: 1.0,
            onset_min: 1.0,
            onset_max: 2.0,
        }
    }
}

impl PushSpec {
    /// Onset and direction drawn from a stream of its own, so the same seed
    /// gives the same push whatever the noise draws.
    pub fn draw(&self, seed: u64) -> DisturbanceEvent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let onset = if self.onset_max > self.onset_min {
            rng.random_range(self.onset_min..self.onset_max)
        } else {
            self.onset_min
        };
        let angle = rng.random_range(0.0..2.0 * PI);
        DisturbanceEvent {
            start: onset,
            end: onset + self.duration,
            kind: DisturbanceKind::ExternalForce,
            magnitude: vec![self.force * angle.cos(), self.force * angle.sin()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmSetup {
    pub params: ArmParams,
    pub weights: ArmWeights,
    pub circle: Circle,
    /// Plant and filter step (s).
    pub dt: f64,
    pub ocp_dt: f64,
    pub horizon: usize,
    pub mpc_every: usize,
    pub duration: f64,
    pub push: PushSpec,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub p0_diag: Vec<f64>,
    pub plant_process_diag: Vec<f64>,
    pub mu: f64,
}

impl Default for ArmSetup {
    fn default() -> Self {
        Self {
            params: ArmParams::default(),
            weights: ArmWeights::default(),
            circle: Circle::default(),
            dt: 0.01,
            ocp_dt: 0.05,
            horizon: 20,
            mpc_every: 1,
            duration: 4.0,
            push: PushSpec::default(),
            q_diag: vec![0.1; STATE_DIM],
            r_diag: vec![1e-6; STATE_DIM],
            p0_diag: vec![1e-6; STATE_DIM],
            plant_process_diag: vec![1e-8; STATE_DIM],
            mu: 3e3,
        }
    }
}

impl ArmSetup {
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn start_state(&self) -> Result<DVector<f64>> {
        let q = self
            .params
            .inverse_kinematics(self.circle.at(0.0))
            .ok_or_else(|| Error::validation("arm.circle", "starts outside the workspace"))?;
        Ok(dvector![q[0], q[1], 0.0, 0.0])
    }

    pub fn script(&self, seed: u64) -> DisturbanceScript {
        DisturbanceScript::new(vec![self.push.draw(seed)])
    }

    pub fn scenario(&self, ddp: DdpOptions) -> Result<Scenario> {
        self.params.validate()?;
        for (name, v) in [("arm.dt", self.dt), ("arm.ocp_dt", self.ocp_dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        let x0 = self.start_state()?;
        let filter = Arc::new(ArmModel {
            params: self.params,
            dt: self.dt,
        });
        let planner = Arc::new(ArmModel {
            params: self.params,
            dt: self.ocp_dt,
        });
        let cost = ArmCost {
            params: self.params,
            weights: self.weights,
            circle: self.circle,
            x_reg: x0.clone(),
        };
        let noise = NoiseSpec::from_diagonals(&self.q_diag, &self.r_diag, &self.p0_diag)?;
        let params = self.params;
        let hold = params.gravity_torque(Vector2::new(x0[0], x0[1]));
        Ok(Scenario {
            plant: Arc::new(ArmPlant { model: (*filter).clone() }),
            filter_model: filter,
            plant_meas_cov: noise.r.clone(),
            noise,
            plant_process_cov: diag(&self.plant_process_diag),
            ocp: OcProblem::new(planner, Arc::new(cost), self.horizon),
            prior_mean: x0.clone(),
            x0,
            mpc_every: self.mpc_every,
            ddp,
            tracked: Arc::new(move |_, x: &DVector<f64>| {
                DVector::from_column_slice(params.forward_kinematics(Vector2::new(x[0], x[1])).as_slice())
            }),
            control_limits: None,
            initial_control: Some(DVector::from_column_slice(hold.as_slice())),
        })
    }

    /// Circle target at each logged time.
    pub fn reference(&self) -> Vec<DVector<f64>> {
        (1..=self.steps())
            .map(|j| DVector::from_column_slice(self.circle.at(j as f64 * self.dt).as_slice()))
            .collect()
    }

    /// First logged row at or after the push onset.
    pub fn window_start(&self, script: &DisturbanceScript) -> usize {
        let onset = script.events.first().map_or(0.0, |e| e.start);
        ((onset / self.dt).ceil() as usize).saturating_sub(1)
    }
}

/// One push-recovery trial of both filters.
pub fn run_pushrecovery_study(setup: &ArmSetup, ddp: DdpOptions, seed: u64) -> Result<ComparisonReport> {
    let script = setup.script(seed);
    let scenario = setup.scenario(ddp)?;
    let risk = RiskConfig::new(setup.mu)?;
    let from = setup.window_start(&script);
    compare_estimators(&scenario, &risk, &script, setup.steps(), seed, &setup.reference(), from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{check_jacobians, fd_jacobian, EPS_FD, JACOBIAN_TOL};

    fn model(dt: f64) -> ArmModel {
        ArmModel {
            params: ArmParams::default(),
            dt,
        }
    }

    #[test]
    fn gravity_compensation_holds_still() {
        let m = model(0.01);
        let x = dvector![0.3, -0.7, 0.0, 0.0];
        let g = m.params.gravity_torque(Vector2::new(0.3, -0.7));
        let next = m.transition(&x, &dvector![g[0], g[1]]);
        assert!((next - x).amax() < 1e-14);
    }

    #[test]
    fn hanging_down_is_an_equilibrium_with_zero_energy() {
        let m = model(0.01);
        let x = dvector![-PI / 2.0, 0.0, 0.0, 0.0];
        assert!(m.params.energy(&x).abs() < 1e-12);
        let next = m.transition(&x, &dvector![0.0, 0.0]);
        assert!((next - x).amax() < 1e-14);
    }

    #[test]
    fn mass_matrix_is_spd() {
        let p = ArmParams::default();
        for k in 0..50 {
            let m = p.mass_matrix(-3.0 + 0.12 * k as f64);
            assert!(m[(0, 0)] > 0.0 && m.determinant() > 0.0);
        }
    }

    #[test]
    fn energy_drift_is_small_at_small_step() {
        let m = model(1e-5);
        let mut x = dvector![0.3, 0.2, 0.0, 0.0];
        let e0 = m.params.energy(&x);
        let zero = dvector![0.0, 0.0];
        for _ in 0..100_000 {
            x = m.transition(&x, &zero);
        }
        let drift = (m.params.energy(&x) - e0).abs() / e0;
        assert!(drift < 0.01, "relative drift {drift}");
    }

    #[test]
    fn kinematics_jacobian_matches_finite_differences() {
        let p = ArmParams::default();
        for k in 0..20 {
            let q = dvector![-1.5 + 0.15 * k as f64, 0.1 * k as f64 - 1.0];
            let num = fd_jacobian(
                |q: &DVector<f64>| DVector::from_column_slice(p.forward_kinematics(Vector2::new(q[0], q[1])).as_slice()),
                &q,
                EPS_FD,
            );
            let ana = p.ee_jacobian(Vector2::new(q[0], q[1]));
            for a in 0..2 {
                for b in 0..2 {
                    assert!((num[(a, b)] - ana[(a, b)]).abs() < 1e-8);
                }
            }
            let gnum = fd_jacobian(
                |q: &DVector<f64>| DVector::from_column_slice(p.gravity_torque(Vector2::new(q[0], q[1])).as_slice()),
                &q,
                EPS_FD,
            );
            let gana = p.gravity_torque_jacobian(Vector2::new(q[0], q[1]));
            assert!((DMatrix::from_column_slice(2, 2, gana.as_slice()) - gnum).amax() < 1e-7);
        }
    }

    #[test]
    fn inverse_kinematics_round_trip() {
        let p = ArmParams::default();
        let c = Circle::default();
        for k in 0..16 {
            let target = c.at(k as f64 * 0.125);
            let q = p.inverse_kinematics(target).unwrap();
            assert!((p.forward_kinematics(q) - target).norm() < 1e-12);
        }
        assert!(p.inverse_kinematics(Vector2::new(2.0, 0.0)).is_none());
    }

    #[test]
    fn model_jacobians_check_out() {
        let m = model(0.05);
        let x = dvector![0.2, -0.9, 0.3, -0.4];
        let rep = check_jacobians(&m, &x, &dvector![1.0, -2.0], EPS_FD, JACOBIAN_TOL);
        assert!(rep.passed());
    }

    #[test]
    fn push_draw_is_seeded_and_bounded() {
        let spec = PushSpec::default();
        let a = spec.draw(3);
        assert_eq!(a, spec.draw(3));
        assert_ne!(a, spec.draw(4));
        assert!(a.start >= spec.onset_min && a.start < spec.onset_max);
        assert!((a.end - a.start - spec.duration).abs() < 1e-12);
        let norm = (a.magnitude[0].powi(2) + a.magnitude[1].powi(2)).sqrt();
        assert!((norm - spec.force).abs() < 1e-12);
    }

    #[test]
    fn push_moves_the_end_effector() {
        let m = model(0.01);
        let plant = ArmPlant { model: m.clone() };
        let script = DisturbanceScript::new(vec![DisturbanceEvent {
            start: 0.0,
            end: 1.0,
            kind: DisturbanceKind::ExternalForce,
            magnitude: vec![0.0, 5.0],
        }]);
        let x = dvector![-0.5, -0.5, 0.0, 0.0];
        let g = m.params.gravity_torque(Vector2::new(-0.5, -0.5));
        let u = dvector![g[0], g[1]];
        let pushed = plant.advance(0.0, &plant.advance(0.0, &x, &u, &script), &u, &script);
        let free = plant.advance(2.0, &plant.advance(2.0, &x, &u, &script), &u, &script);
        let lift = m.params.forward_kinematics(Vector2::new(pushed[0], pushed[1]))[1]
            - m.params.forward_kinematics(Vector2::new(free[0], free[1]))[1];
        assert!(lift > 0.0);
    }

    #[test]
    fn gauss_newton_expansion_against_residual_reference() {
        let setup = ArmSetup::default();
        let cost = ArmCost {
            params: setup.params,
            weights: setup.weights,
            circle: setup.circle,
            x_reg: setup.start_state().unwrap(),
        };
        let x = dvector![0.1, -1.2, 0.5, -0.3];
        let u = dvector![3.0, 1.0];
        let a = cost.stage_expansion(0.3, &x, &u).unwrap();
        let n = crate::ocp::fd_stage_expansion(&cost, 0.3, &x, &u);
        let rel = |p: f64, q: f64| (p - q).abs() / q.abs().max(1.0);
        for (p, q) in a.lx.iter().zip(n.lx.iter()).chain(a.lu.iter().zip(n.lu.iter())) {
            assert!(rel(*p, *q) < 1e-5, "{p} vs {q}");
        }
        assert_eq!(a.luu, n.luu.map(|v| (v * 1e6).round() / 1e6));
        // Gauss-Newton reference: 2 w J_r^T J_r with finite-difference residual Jacobians.
        let p = setup.params;
        let ee = |z: &DVector<f64>| DVector::from_column_slice(p.forward_kinematics(Vector2::new(z[0], z[1])).as_slice());
        let tau = |z: &DVector<f64>| DVector::from_column_slice(p.gravity_torque(Vector2::new(z[0], z[1])).as_slice());
        let jr = fd_jacobian(ee, &x, EPS_FD);
        let jg = fd_jacobian(tau, &x, EPS_FD);
        let w = setup.weights;
        let gn = DMatrix::identity(4, 4) * (2.0 * w.state)
            + jr.transpose() * &jr * (2.0 * w.end_effector)
            + jg.transpose() * &jg * (2.0 * w.gravity_compensation);
        assert!((a.lxx - gn).amax() < 1e-5);
        assert!((a.lux + jg * (2.0 * w.gravity_compensation)).amax() < 1e-8);
    }

    #[test]
    fn window_starts_at_push_onset() {
        let s = ArmSetup::default();
        let script = DisturbanceScript::new(vec![DisturbanceEvent {
            start: 1.5,
            end: 2.5,
            kind: DisturbanceKind::ExternalForce,
            magnitude: vec![1.0, 0.0],
        }]);
        let k = s.window_start(&script);
        assert!((s.reference().len() - 400) == 0);
        assert!(((k + 1) as f64 * s.dt - 1.5).abs() < 1e-9);
    }
}
