//! Config-driven studies: presets, Monte Carlo trials, CSV/JSON export and
//! comparison tables.
//!
//! A study writes `trials.csv` (one row per trial and estimator),
//! `summary.json` (aggregates and percentile curves, no timing),
//! `metadata.json` (config echo, version, wall time) and, unless disabled,
//! `trajectories/trial_NNNN_<estimator>.csv`.

pub mod compare;
pub mod config;
pub mod study;
pub mod verify;

pub use compare::{compare, comparison_table, read_summary};
pub use config::{load_config, read_config, BenchmarkSetup, EstimatorChoice, ExperimentConfig, Preset};
pub use study::{run_study, Study, StudyOutput, StudySummary, TrialRecord, TrialStatus};
