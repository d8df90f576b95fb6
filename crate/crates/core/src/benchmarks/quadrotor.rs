//! Planar quadrotor carrying an unknown load.
//!
//! State `(p_x, p_y, theta, v_x, v_y, omega, m)` with the mass appended as a
//! constant parameter, controls are the two rotor forces, and only
//! `(p_x, p_y, theta)` is measured.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_loop::{
    ControlLimits, DisturbanceEvent, DisturbanceKind, DisturbanceScript, EstimatorKind, Plant, Scenario, TrajectoryLog,
};
use crate::ddp::DdpOptions;
use crate::filters::RiskConfig;
use crate::models::{NoiseSpec, SystemModel};
use crate::ocp::{CostExpansion, CostModel, OcProblem};
use crate::Result;

use super::{compare_estimators, diag, ComparisonReport};

pub const STATE_DIM: usize = 7;
pub const MASS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorParams {
    /// Robot mass without load (kg).
    pub mass: f64,
    /// Distance between the rotors (m).
    pub rotor_distance: f64,
    /// Lever arm of the rotor forces (m).
    pub lever_arm: f64,
    pub gravity: f64,
    /// Load carried during the first part of the flight (kg).
    pub load: f64,
    pub dt: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 2.0,
            rotor_distance: 0.2,
            lever_arm: 0.2,
            gravity: 9.81,
            load: 3.0,
            dt: 0.05,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("quadrotor.mass", self.mass),
            ("quadrotor.rotor_distance", self.rotor_distance),
            ("quadrotor.lever_arm", self.lever_arm),
            ("quadrotor.gravity", self.gravity),
            ("quadrotor.dt", self.dt),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(crate::Error::validation(name, "must be positive"));
            }
        }
        if !(self.load >= 0.0) {
            return Err(crate::Error::validation("quadrotor.load", "must be >= 0"));
        }
        Ok(())
    }
}

/// Euler-integrated planar quadrotor; the mass is read from the state.
#[derive(Debug, Clone)]
pub struct QuadrotorModel {
    pub params: QuadrotorParams,
}

impl QuadrotorModel {
    pub fn new(params: QuadrotorParams) -> Self {
        Self { params }
    }

    /// Hover thrust per rotor for mass `m`.
    pub fn hover_control(&self, m: f64) -> DVector<f64> {
        let half = 0.5 * m * self.params.gravity;
        dvector![half, half]
    }

    fn acceleration(&self, x: &DVector<f64>, u: &DVector<f64>) -> [f64; 3] {
        let p = &self.params;
        let (th, m) = (x[2], x[MASS]);
        let thrust = u[0] + u[1];
        [
            -thrust * th.sin() / m,
            thrust * th.cos() / m - p.gravity,
            p.lever_arm * (u[0] - u[1]) / (m * p.rotor_distance),
        ]
    }

    /// Derivatives of the accelerations with respect to the state and the controls.
    fn acceleration_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = &self.params;
        let (th, m) = (x[2], x[MASS]);
        let (s, c) = th.sin_cos();
        let thrust = u[0] + u[1];
        let spin = p.lever_arm / (m * p.rotor_distance);
        let mut ax = DMatrix::zeros(3, STATE_DIM);
        ax[(0, 2)] = -thrust * c / m;
        ax[(0, MASS)] = thrust * s / (m * m);
        ax[(1, 2)] = -thrust * s / m;
        ax[(1, MASS)] = -thrust * c / (m * m);
        ax[(2, MASS)] = -spin * (u[0] - u[1]) / m;
        let au = DMatrix::from_row_slice(3, 2, &[-s / m, -s / m, c / m, c / m, spin, -spin]);
        (ax, au)
    }
}

impl SystemModel for QuadrotorModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn meas_dim(&self) -> usize {
        3
    }
    fn dt(&self) -> f64 {
        self.params.dt
    }

    /// Semi-implicit Euler: velocities first, positions with the new velocities.
    fn transition(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let dt = self.params.dt;
        let a = self.acceleration(x, u);
        let mut next = x.clone();
        for i in 0..3 {
            next[3 + i] = x[3 + i] + dt * a[i];
            next[i] = x[i] + dt * next[3 + i];
        }
        next
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, 3).into_owned()
    }

    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let dt = self.params.dt;
        let (ax, _) = self.acceleration_jacobians(x, u);
        let mut f = DMatrix::identity(STATE_DIM, STATE_DIM);
        for i in 0..3 {
            f[(i, 3 + i)] = dt;
            for j in 0..STATE_DIM {
                f[(3 + i, j)] += dt * ax[(i, j)];
                f[(i, j)] += dt * dt * ax[(i, j)];
            }
        }
        Some(f)
    }

    fn control_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let dt = self.params.dt;
        let (_, au) = self.acceleration_jacobians(x, u);
        let mut b = DMatrix::zeros(STATE_DIM, 2);
        b.view_mut((0, 0), (3, 2)).copy_from(&(&au * (dt * dt)));
        b.view_mut((3, 0), (3, 2)).copy_from(&(au * dt));
        Some(b)
    }

    fn observation_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(3, STATE_DIM);
        h.view_mut((0, 0), (3, 3)).fill_with_identity();
        Some(h)
    }
}

/// True plant: the mass coordinate follows the base mass plus active
/// mass-change events.
#[derive(Debug, Clone)]
pub struct QuadrotorPlant {
    pub model: QuadrotorModel,
}

impl QuadrotorPlant {
    pub fn true_mass(&self, t: f64, script: &DisturbanceScript) -> f64 {
        self.model.params.mass
            + script
                .active(DisturbanceKind::MassChange, t)
                .map(|e| e.magnitude[0])
                .sum::<f64>()
    }
}

impl Plant for QuadrotorPlant {
    fn advance(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, script: &DisturbanceScript) -> DVector<f64> {
        let mut x = x.clone();
        x[MASS] = self.true_mass(t, script);
        self.model.transition(&x, u)
    }
}

/// Stage-cost weights: position, attitude, velocities, control deviation from hover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorWeights {
    pub position: f64,
    pub attitude: f64,
    pub velocity: f64,
    pub control: f64,
}

impl Default for QuadrotorWeights {
    fn default() -> Self {
        Self {
            position: 100.0,
            attitude: 10.0,
            velocity: 0.01,
            control: 0.1,
        }
    }
}

/// Tracking cost with control reference `(m g / 2, m g / 2)` taken from the
/// state's mass. The terminal cost keeps the state terms only.
#[derive(Debug, Clone)]
pub struct QuadrotorCost {
    pub target: [f64; 2],
    pub weights: QuadrotorWeights,
    pub gravity: f64,
}

impl QuadrotorCost {
    fn state_terms(&self, x: &DVector<f64>) -> f64 {
        let w = &self.weights;
        let (dx, dy) = (x[0] - self.target[0], x[1] - self.target[1]);
        w.position * (dx * dx + dy * dy) + w.attitude * x[2] * x[2] + w.velocity * (x[3] * x[3] + x[4] * x[4] + x[5] * x[5])
    }

    fn state_expansion(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let w = &self.weights;
        let lx = DVector::from_column_slice(&[
            2.0 * w.position * (x[0] - self.target[0]),
            2.0 * w.position * (x[1] - self.target[1]),
            2.0 * w.attitude * x[2],
            2.0 * w.velocity * x[3],
            2.0 * w.velocity * x[4],
            2.0 * w.velocity * x[5],
            0.0,
        ]);
        let lxx = diag(&[
            2.0 * w.position,
            2.0 * w.position,
            2.0 * w.attitude,
            2.0 * w.velocity,
            2.0 * w.velocity,
            2.0 * w.velocity,
            0.0,
        ]);
        (lx, lxx)
    }

    fn control_residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u.add_scalar(-0.5 * x[MASS] * self.gravity)
    }
}

impl CostModel for QuadrotorCost {
    fn stage_cost(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.state_terms(x) + self.weights.control * self.control_residual(x, u).norm_squared()
    }

    fn terminal_cost(&self, _t: f64, x: &DVector<f64>) -> f64 {
        self.state_terms(x)
    }

    fn stage_expansion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Option<CostExpansion> {
        let wu = self.weights.control;
        let g = self.gravity;
        let r = self.control_residual(x, u);
        let (mut lx, mut lxx) = self.state_expansion(x);
        // d r / d m = -g/2 on both rotors.
        lx[MASS] = -wu * g * (r[0] + r[1]);
        lxx[(MASS, MASS)] = wu * g * g;
        let mut lux = DMatrix::zeros(2, STATE_DIM);
        lux[(0, MASS)] = -wu * g;
        lux[(1, MASS)] = -wu * g;
        Some(CostExpansion {
            l: self.stage_cost(t, x, u),
            lx,
            lu: r * (2.0 * wu),
            lxx,
            luu: DMatrix::identity(2, 2) * (2.0 * wu),
            lux,
        })
    }

    fn terminal_expansion(&self, t: f64, x: &DVector<f64>) -> Option<CostExpansion> {
        let (lx, lxx) = self.state_expansion(x);
        Some(CostExpansion {
            l: self.terminal_cost(t, x),
            lx,
            lxx,
            ..CostExpansion::zeros(STATE_DIM, 0)
        })
    }
}

pub fn make_quadrotor(
    params: QuadrotorParams,
    weights: QuadrotorWeights,
    target: [f64; 2],
    horizon: usize,
) -> (Arc<QuadrotorModel>, OcProblem) {
    let model = Arc::new(QuadrotorModel::new(params));
    let cost = QuadrotorCost {
        target,
        weights,
        gravity: params.gravity,
    };
    let ocp = OcProblem::new(model.clone(), Arc::new(cost), horizon);
    (model, ocp)
}

/// Load-carrying flight from `(0, 0)` to `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorSetup {
    pub params: QuadrotorParams,
    pub weights: QuadrotorWeights,
    pub target: [f64; 2],
    pub horizon: usize,
    pub duration: f64,
    /// The load is carried on `[load_pickup_time, load_drop_time)`.
    pub load_pickup_time: f64,
    pub load_drop_time: f64,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub p0_diag: Vec<f64>,
    /// Process noise injected into the plant (the mass coordinate follows the script).
    pub plant_process_diag: Vec<f64>,
    /// Covariance of the sensor noise actually drawn; the filter uses `r_diag`.
    pub plant_meas_diag: Vec<f64>,
    /// Rotor forces are clamped to `[0, max_rotor_force]`.
    pub max_rotor_force: f64,
    pub mu: f64,
}

impl Default for QuadrotorSetup {
    fn default() -> Self {
        let mut q = vec![1e-4; STATE_DIM];
        q[MASS] = 2.0;
        let mut plant = vec![1e-6; STATE_DIM];
        plant[MASS] = 0.0;
        Self {
            params: QuadrotorParams::default(),
            weights: QuadrotorWeights::default(),
            target: [1.0, 0.0],
            horizon: 20,
            duration: 4.0,
            load_pickup_time: 0.0,
            load_drop_time: 1.0,
            q_diag: q,
            r_diag: vec![1e-4; 3],
            p0_diag: vec![1e-4; STATE_DIM],
            plant_process_diag: plant,
            max_rotor_force: 60.0,
            plant_meas_diag: vec![1e-6; 3],
            mu: 4e-3,
        }
    }
}

impl QuadrotorSetup {
    pub fn steps(&self) -> usize {
        (self.duration / self.params.dt).round() as usize
    }

    pub fn script(&self) -> DisturbanceScript {
        if self.params.load > 0.0 && self.load_drop_time > self.load_pickup_time {
            DisturbanceScript::new(vec![DisturbanceEvent {
                start: self.load_pickup_time,
                end: self.load_drop_time,
                kind: DisturbanceKind::MassChange,
                magnitude: vec![self.params.load],
            }])
        } else {
            DisturbanceScript::default()
        }
    }

    pub fn scenario(&self, ddp: DdpOptions, script: &DisturbanceScript) -> Result<Scenario> {
        self.params.validate()?;
        let (model, ocp) = make_quadrotor(self.params, self.weights, self.target, self.horizon);
        let plant = QuadrotorPlant {
            model: (*model).clone(),
        };
        let mut x0 = DVector::zeros(STATE_DIM);
        x0[MASS] = plant.true_mass(0.0, script);
        let mut prior = DVector::zeros(STATE_DIM);
        prior[MASS] = self.params.mass;
        let noise = NoiseSpec::from_diagonals(&self.q_diag, &self.r_diag, &self.p0_diag)?;
        Ok(Scenario {
            plant: Arc::new(plant),
            filter_model: model,
            plant_meas_cov: diag(&self.plant_meas_diag),
            noise,
            plant_process_cov: diag(&self.plant_process_diag),
            ocp,
            x0,
            prior_mean: prior,
            mpc_every: 1,
            ddp,
            tracked: Arc::new(|_, x: &DVector<f64>| x.rows(0, 2).into_owned()),
            control_limits: Some(ControlLimits {
                lower: DVector::zeros(2),
                upper: DVector::from_element(2, self.max_rotor_force),
            }),
            initial_control: None,
        })
    }

    /// Positions of the noiseless run whose controller sees the true state.
    pub fn reference(&self, ddp: DdpOptions, script: &DisturbanceScript) -> Result<Vec<DVector<f64>>> {
        let mut sc = self.scenario(ddp, script)?;
        sc.plant_process_cov.fill(0.0);
        sc.plant_meas_cov.fill(0.0);
        let log = crate::closed_loop::run_closed_loop(
            &sc,
            EstimatorKind::Perfect,
            &RiskConfig::new(0.0)?,
            script,
            self.steps(),
            0,
        )?;
        Ok(reference_from(&log))
    }
}

fn reference_from(log: &TrajectoryLog) -> Vec<DVector<f64>> {
    log.rows.iter().map(|r| r.tracked.clone()).collect()
}

/// EKF vs risk-sensitive EKF on the load-carrying flight.
pub fn run_quadrotor_study(setup: &QuadrotorSetup, ddp: DdpOptions, seed: u64) -> Result<ComparisonReport> {
    let script = setup.script();
    let scenario = setup.scenario(ddp, &script)?;
    let reference = setup.reference(ddp, &script)?;
    let risk = RiskConfig::new(setup.mu)?;
    compare_estimators(&scenario, &risk, &script, setup.steps(), seed, &reference, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{check_jacobians, dyn_jacobian, step, EPS_FD, JACOBIAN_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> QuadrotorModel {
        QuadrotorModel::new(QuadrotorParams::default())
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let m = model();
        let mut x = DVector::zeros(STATE_DIM);
        x[MASS] = 2.0;
        x[0] = 0.3;
        let u = m.hover_control(2.0);
        assert_eq!(u, dvector![9.81, 9.81]);
        assert_eq!(step(&m, &x, &u).unwrap(), x);
    }

    #[test]
    fn extra_thrust_one_euler_step() {
        let m = model();
        let mut x = DVector::zeros(STATE_DIM);
        x[MASS] = 2.0;
        let u = m.hover_control(2.0).add_scalar(1.0);
        let next = step(&m, &x, &u).unwrap();
        assert!((next[4] - 0.05 * 2.0 / 2.0).abs() < 1e-15);
        assert!((next[1] - 0.05 * next[4]).abs() < 1e-15);
    }

    #[test]
    fn measurement_selects_pose() {
        let m = model();
        let x = DVector::from_column_slice(&[0.3, 0.1, 0.2, 1.0, 2.0, 3.0, 2.0]);
        assert_eq!(crate::models::measure(&m, &x).unwrap(), dvector![0.3, 0.1, 0.2]);
    }

    #[test]
    fn jacobian_entries_by_hand() {
        let m = model();
        let mut x = DVector::zeros(STATE_DIM);
        x[MASS] = 2.0;
        let u = dvector![12.0, 8.0];
        let f = dyn_jacobian(&m, &x, &u);
        assert!((f[(3, 2)] - (-0.05 * 20.0 / 2.0)).abs() < 1e-15);
        assert!((f[(0, 2)] - (-0.05 * 0.05 * 20.0 / 2.0)).abs() < 1e-15);
        // Mass row is an identity row.
        for j in 0..STATE_DIM {
            assert_eq!(f[(MASS, j)], if j == MASS { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn jacobians_match_finite_differences_at_random_states() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut x = DVector::from_fn(STATE_DIM, |_, _| rng.random_range(-1.0..1.0));
            x[MASS] = rng.random_range(1.0..6.0);
            let u = DVector::from_fn(2, |_, _| rng.random_range(0.0..30.0));
            let rep = check_jacobians(&m, &x, &u, EPS_FD, JACOBIAN_TOL);
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn cost_zero_at_target_hover() {
        let (_, ocp) = make_quadrotor(QuadrotorParams::default(), QuadrotorWeights::default(), [1.0, 0.0], 20);
        let mut x = DVector::zeros(STATE_DIM);
        x[0] = 1.0;
        x[MASS] = 2.0;
        let u = dvector![9.81, 9.81];
        let e = ocp.expand_stage(0, &x, &u).unwrap();
        assert_eq!(e.l, 0.0);
        assert!(e.lx.rows(0, 2).iter().all(|v| *v == 0.0));
        assert_eq!(ocp.total_cost(&x, &vec![u; 20]).unwrap(), 0.0);
    }

    #[test]
    fn cost_expansion_matches_finite_differences() {
        let cost = QuadrotorCost {
            target: [1.0, 0.0],
            weights: QuadrotorWeights::default(),
            gravity: 9.81,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut x = DVector::from_fn(STATE_DIM, |_, _| rng.random_range(-1.0..1.0));
            x[MASS] = rng.random_range(1.0..6.0);
            let u = DVector::from_fn(2, |_, _| rng.random_range(0.0..30.0));
            let a = cost.stage_expansion(0.0, &x, &u).unwrap();
            let n = crate::ocp::fd_stage_expansion(&cost, 0.0, &x, &u);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
            for (p, q) in a.lx.iter().zip(n.lx.iter()).chain(a.lu.iter().zip(n.lu.iter())) {
                assert!(rel(*p, *q) < 1e-4);
            }
            for (p, q) in a.lxx.iter().zip(n.lxx.iter()).chain(a.lux.iter().zip(n.lux.iter())) {
                assert!(rel(*p, *q) < 1e-4, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn preset_noise_values() {
        let s = QuadrotorSetup::default();
        assert_eq!(s.mu, 4e-3);
        assert_eq!(s.q_diag[MASS], 2.0);
        assert!(s.q_diag[..MASS].iter().all(|q| *q == 1e-4));
        assert_eq!(s.r_diag, vec![1e-4; 3]);
        assert_eq!(s.p0_diag, vec![1e-4; 7]);
        assert_eq!(s.steps(), 80);
    }

    #[test]
    fn one_prediction_from_rest_adds_mass_noise() {
        let s = QuadrotorSetup::default();
        let sc = s.scenario(DdpOptions::default(), &DisturbanceScript::default()).unwrap();
        let b = crate::filters::GaussianBelief::new(sc.prior_mean.clone(), sc.noise.p0.clone()).unwrap();
        let u = QuadrotorModel::new(s.params).hover_control(2.0);
        let p = crate::filters::predict(&b, sc.filter_model.as_ref(), &u, &sc.noise.q).unwrap();
        assert!((p.cov[(MASS, MASS)] - (1e-4 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn noiseless_hover_with_known_mass_holds_position() {
        let s = QuadrotorSetup {
            target: [0.0, 0.0],
            params: QuadrotorParams {
                load: 0.0,
                ..QuadrotorParams::default()
            },
            ..QuadrotorSetup::default()
        };
        let script = s.script();
        let mut sc = s.scenario(DdpOptions::default(), &script).unwrap();
        sc.plant_process_cov.fill(0.0);
        sc.plant_meas_cov.fill(0.0);
        for kind in [EstimatorKind::Ekf, EstimatorKind::RsEkf] {
            let log =
                crate::closed_loop::run_closed_loop(&sc, kind, &RiskConfig::new(s.mu).unwrap(), &script, 100, 0).unwrap();
            let worst = log.rows.iter().map(|r| r.x_true.rows(0, 2).amax()).fold(0.0, f64::max);
            assert!(worst < 1e-6, "{kind:?}: {worst}");
        }
    }

    #[test]
    fn no_load_flight_rs_mass_offset_not_below_ekf() {
        let s = QuadrotorSetup {
            params: QuadrotorParams {
                load: 0.0,
                ..QuadrotorParams::default()
            },
            ..QuadrotorSetup::default()
        };
        let script = s.script();
        let sc = s.scenario(DdpOptions::default(), &script).unwrap();
        let risk = RiskConfig::new(s.mu).unwrap();
        let tail = |kind| {
            (0..5)
                .map(|seed| {
                    let log = crate::closed_loop::run_closed_loop(&sc, kind, &risk, &script, s.steps(), seed).unwrap();
                    let last = &log.rows[log.rows.len() - 20..];
                    last.iter().map(|r| (r.x_hat[MASS] - r.x_true[MASS]).abs()).sum::<f64>() / last.len() as f64
                })
                .sum::<f64>()
        };
        let (ekf, rs) = (tail(EstimatorKind::Ekf), tail(EstimatorKind::RsEkf));
        assert!(rs >= ekf, "rs {rs} ekf {ekf}");
    }
}
