//! Command-line runner for kernel-bandit simulations.
//!
//! Exit codes: 0 on success, 1 on validation or configuration failure,
//! 2 when some experiment cells failed while others completed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use opkb::design::FwOptions;
use opkb::harness::{grid_search, run_experiment, ExperimentConfig};
use opkb::kernels::{cholesky_feature_map, gram, ActionSet, DEFAULT_JITTER};
use opkb::rng;

#[derive(Parser)]
#[command(name = "opkb", about = "Kernel-bandit simulation harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the config's seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the config's horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Worker-pool size (also settable via OPKB_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(t) = self.horizon {
            config.t = t;
        }
        if let Some(w) = self.workers {
            config.workers = Some(w);
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every (algorithm, environment, seed) cell of a config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Expand parameter grids, run all points and write a leaderboard.
    Grid {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Validate a config file without running anything.
    Validate { config: PathBuf },
    /// Compute the maximum information gain for a kernel on a sampled
    /// action set.
    InfoGain {
        /// Kernel kind: linear, rbf, matern12, matern32, matern52.
        #[arg(long, default_value = "rbf")]
        kernel: String,
        #[arg(long, default_value_t = 0.2)]
        lengthscale: f64,
        /// Number of actions sampled from the unit sphere.
        #[arg(short, long, default_value_t = 30)]
        n: usize,
        /// Ambient dimension.
        #[arg(short, long, default_value_t = 5)]
        d: usize,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Seed for the action-set draw.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative duality-gap tolerance.
        #[arg(long, default_value_t = 1e-6)]
        rel_tol: f64,
    },
}

fn load_config(path: &PathBuf, overrides: &Overrides) -> Result<ExperimentConfig, String> {
    let mut config = ExperimentConfig::from_file(path).map_err(|e| e.to_string())?;
    overrides.apply(&mut config);
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides } => {
            let config = match load_config(&config, &overrides) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match run_experiment(&config) {
                Ok(out) => {
                    let failed = out.failed_cells();
                    println!("summary written to {}", out.summary_path.display());
                    for row in &out.summary {
                        if row.checkpoint == config.t {
                            let stderr = row
                                .stderr_cum_regret
                                .map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
                            println!(
                                "{} / {}: final regret {:.2} +- {} over {} seeds ({:.2} restarts)",
                                row.algorithm,
                                row.environment,
                                row.mean_cum_regret,
                                stderr,
                                row.n_seeds,
                                row.mean_restarts
                            );
                        }
                    }
                    if failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for f in failed {
                            eprintln!("cell failed: {f}");
                        }
                        ExitCode::from(2)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Grid { config, overrides } => {
            let config = match load_config(&config, &overrides) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match grid_search(&config) {
                Ok(out) => {
                    println!("leaderboard written to {}", out.leaderboard_path.display());
                    for row in &out.leaderboard {
                        println!(
                            "#{} {}: mean final regret {:.2} over {} cells",
                            row.rank, row.algorithm, row.mean_final_regret, row.n_cells
                        );
                    }
                    let failed = out.experiment.failed_cells();
                    if failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for f in failed {
                            eprintln!("cell failed: {f}");
                        }
                        ExitCode::from(2)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Validate { config } => match ExperimentConfig::from_file(&config) {
            Ok(_) => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("invalid config: {e}");
                ExitCode::from(1)
            }
        },
        Command::InfoGain { kernel, lengthscale, n, d, horizon, sigma, seed, rel_tol } => {
            let run = || -> opkb::Result<()> {
                let kernel = opkb::harness::KernelConfig {
                    kind: kernel.clone(),
                    lengthscale: Some(lengthscale),
                }
                .build()?;
                let mut r = rng::stream(seed, rng::streams::ENVIRONMENT);
                let actions = ActionSet::sample_unit_sphere(n, d, &mut r);
                let k = gram(&kernel, &actions)?;
                let map = cholesky_feature_map(&k, DEFAULT_JITTER)?;
                let opts = FwOptions { rel_tol, ..FwOptions::default() };
                let out = opkb::design::info_gain(&map, horizon as f64, sigma, &opts)?;
                println!(
                    "gamma = {:.6} (duality gap {:.2e}, {} iterations, converged: {})",
                    out.gamma,
                    out.diagnostics.duality_gap,
                    out.diagnostics.iterations,
                    out.diagnostics.converged
                );
                Ok(())
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
