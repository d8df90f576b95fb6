//! Risk-sensitive output-feedback model predictive control.
//!
//! The crate couples three pieces:
//!
//! * [`filters`]: an extended Kalman filter and its risk-sensitive variant, whose
//!   mean update is biased by a quadratic model of the controller's value function;
//! * [`ddp`]: an iLQR solver for the finite-horizon problems in [`ocp`], which
//!   exports the value-function expansion at every node of the horizon;
//! * [`closed_loop`]: the receding-horizon loop that hands the expansion from the
//!   controller back to the filter at every step.
//!
//! [`benchmarks`] provides the planar quadrotor, two-link arm and centroidal plants,
//! [`oracle`] provides dense reference solvers used to check the closed forms, and
//! [`harness`] drives config-based Monte Carlo studies.

pub mod benchmarks;
pub mod closed_loop;
pub mod ddp;
mod error;
pub mod filters;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod ocp;
pub mod oracle;
pub mod parallel;

pub use error::{Error, Result};
