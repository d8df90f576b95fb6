use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rsekf::harness::{self, verify, EstimatorChoice, ExperimentConfig, Preset};
use rsekf::Error;

/// Risk-sensitive vs standard EKF inside output-feedback MPC.
#[derive(Debug, Parser)]
#[command(name = "rsekf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a study and write trials.csv, summary.json and metadata.json.
    Run {
        /// TOML config; may be omitted when --preset is given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorChoice>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 uses every core, 1 runs sequentially.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory. Defaults to the config's `out_dir`, then
        /// `$RSEKF_OUT_DIR/<preset>`, then `results/<preset>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the per-trial trajectory CSVs.
        #[arg(long)]
        no_trajectories: bool,
    },
    /// Print a table comparing summary.json files.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run the randomized oracle checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a preset as a complete, editable config.
    DumpPreset {
        #[arg(value_enum)]
        preset: Preset,
        /// Write to this file instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation { .. } | Error::Parse(_) | Error::Schema(_) => 2,
        _ => 3,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            preset,
            estimator,
            mu,
            trials,
            seed,
            jobs,
            out,
            no_trajectories,
        } => {
            let mut cfg = match &config {
                Some(path) => match harness::read_config(path) {
                    Ok(c) => c,
                    Err(e) => return fail(e),
                },
                None if preset.is_some() => ExperimentConfig {
                    write_trajectories: true,
                    ..ExperimentConfig::default()
                },
                None => {
                    return fail(Error::Validation {
                        field: "config".into(),
                        reason: "pass --config or --preset".into(),
                    })
                }
            };
            if preset.is_some() {
                cfg.preset = preset;
            }
            if let Some(v) = estimator {
                cfg.estimator = v;
            }
            if mu.is_some() {
                cfg.mu = mu;
            }
            if trials.is_some() {
                cfg.trials = trials;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = jobs {
                cfg.jobs = v;
            }
            if no_trajectories {
                cfg.write_trajectories = false;
            }
            let cfg = match cfg.resolve() {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let preset = cfg.preset.expect("resolved configs carry a preset");
            let out_dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| {
                std::env::var_os("RSEKF_OUT_DIR")
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("results"))
                    .join(preset.name())
            });
            match harness::run_study(&cfg, Some(&out_dir)) {
                Ok(output) => {
                    let name = out_dir.display().to_string();
                    println!("{}", harness::comparison_table(&[(name, output.summary.clone())]));
                    if output.summary.failed > 0 {
                        println!("{} of {} trials failed; see trials.csv", output.summary.failed, output.summary.trials);
                    }
                    println!("wrote {} in {:.1}s", out_dir.display(), output.wall_time_s);
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare { files } => match harness::compare(&files) {
            Ok(table) => {
                println!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Verify { seed } => {
            let reports = verify::run_all(seed);
            for r in &reports {
                println!("{r}");
            }
            if reports.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Command::DumpPreset { preset, out } => {
            let text = match ExperimentConfig::for_preset(preset).to_toml_string() {
                Ok(t) => t,
                Err(e) => return fail(e),
            };
            match out {
                Some(path) => match std::fs::write(&path, text) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => fail(e.into()),
                },
                None => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
            }
        }
    }
}
