//! Experiment configuration, seeded parallel execution and CSV reporting.
//!
//! A config file describes a horizon, a seed list, a set of algorithms and a
//! set of environment presets. Every `(algorithm, environment, seed)` cell
//! runs independently: the cell seed derives named RNG streams (environment,
//! learner, scheduler, network), so results do not depend on execution
//! order, and all algorithms face the same environment draw at a given seed.
//! Each cell writes one trace CSV; a summary CSV aggregates cumulative
//! regret (mean and standard error over seeds) at ten evenly spaced
//! checkpoints, plus restart counts for the adaptive algorithms.
//!
//! Numeric algorithm parameters may be given as arrays, turning the config
//! into a grid; [`grid_search`] expands the grid, evaluates every point and
//! ranks by mean final cumulative regret. Plain [`run_experiment`] rejects
//! grids. Files are written atomically (temp file + rename); reruns with the
//! same config and seeds are bit-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::adaopkb::{ada_opkb_run, opkb_run, AlgoParams};
use crate::baselines::{gpucb_run, GpucbConfig};
use crate::design::{info_gain, FwOptions};
use crate::envs::{cosine_env, gp_switching_env, BanditInstance, PhaseSchedule, RegretTrace};
use crate::error::{Error, Result};
use crate::kernels::{cholesky_feature_map, gram, Kernel, MaternNu, DEFAULT_JITTER};
use crate::neural::{ada_opnn_run, opnn_run, NeuralConfig, NeuralFeatureProvider};
use crate::rng::{stream, streams};

/// Default tuned constants `[c0, c1, c2, c3, c4]` for the OP-family
/// algorithms, selected by grid search on the single-switch environment at
/// simulation scale.
pub const DEFAULT_TUNED_CONSTANTS: [f64; 5] = [0.5, 0.5, 1.0, 0.03, 0.25];

/// Environment variable controlling the worker-pool size.
pub const WORKERS_ENV_VAR: &str = "OPKB_WORKERS";

/// A numeric parameter that may carry one value or a grid of values.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GridF64 {
    One(f64),
    Many(Vec<f64>),
}

impl GridF64 {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GridF64::One(v) => vec![*v],
            GridF64::Many(v) => v.clone(),
        }
    }

    fn is_grid(&self) -> bool {
        matches!(self, GridF64::Many(v) if v.len() != 1)
    }

    fn single(&self, field: &str) -> Result<f64> {
        match self {
            GridF64::One(v) => Ok(*v),
            GridF64::Many(v) if v.len() == 1 => Ok(v[0]),
            GridF64::Many(_) => Err(Error::Config(format!(
                "field `{field}` holds a grid; use the grid command to expand it"
            ))),
        }
    }
}

/// Integer counterpart of [`GridF64`].
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GridUsize {
    One(usize),
    Many(Vec<usize>),
}

impl GridUsize {
    pub fn values(&self) -> Vec<usize> {
        match self {
            GridUsize::One(v) => vec![*v],
            GridUsize::Many(v) => v.clone(),
        }
    }

    fn is_grid(&self) -> bool {
        matches!(self, GridUsize::Many(v) if v.len() != 1)
    }

    fn single(&self, field: &str) -> Result<usize> {
        match self {
            GridUsize::One(v) => Ok(*v),
            GridUsize::Many(v) if v.len() == 1 => Ok(v[0]),
            GridUsize::Many(_) => Err(Error::Config(format!(
                "field `{field}` holds a grid; use the grid command to expand it"
            ))),
        }
    }
}

/// Learner-side kernel selection.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// One of `linear`, `rbf`, `matern12`, `matern32`, `matern52`.
    pub kind: String,
    pub lengthscale: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { kind: "rbf".into(), lengthscale: Some(0.2) }
    }
}

impl KernelConfig {
    pub fn build(&self) -> Result<Kernel> {
        let ls = self.lengthscale.unwrap_or(0.2);
        match self.kind.as_str() {
            "linear" => Ok(Kernel::Linear),
            "rbf" => Ok(Kernel::rbf(ls)),
            "matern12" => Ok(Kernel::matern(MaternNu::Half, ls)),
            "matern32" => Ok(Kernel::matern(MaternNu::ThreeHalves, ls)),
            "matern52" => Ok(Kernel::matern(MaternNu::FiveHalves, ls)),
            other => Err(Error::Config(format!("unknown kernel kind `{other}`"))),
        }
    }
}

/// One algorithm entry of the config file. Which fields apply depends on
/// `kind`; irrelevant fields are rejected during validation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    /// One of `opkb`, `ada-opkb`, `opnn`, `ada-opnn`, `gpucb`, `sw-gpucb`.
    pub kind: String,
    /// Label used in file names and summaries; defaults to `kind`.
    pub name: Option<String>,

    // OP-family parameters.
    pub sigma: Option<GridF64>,
    pub delta: Option<f64>,
    pub c0: Option<GridF64>,
    pub c1: Option<GridF64>,
    pub c2: Option<GridF64>,
    pub c3: Option<GridF64>,
    pub c4: Option<GridF64>,
    pub kernel: Option<KernelConfig>,

    // Neural parameters.
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub train_steps: Option<GridUsize>,
    pub step_size: Option<GridF64>,
    pub train_reg: Option<GridF64>,
    pub target_scale: Option<f64>,

    // GP-UCB parameters.
    pub lambda: Option<GridF64>,
    pub ucb_scale: Option<GridF64>,
    pub window: Option<GridUsize>,
    pub exact_info_gain: Option<bool>,
}

const OP_FIELDS: &[&str] = &["sigma", "delta", "c0", "c1", "c2", "c3", "c4", "kernel"];
const NEURAL_FIELDS: &[&str] =
    &["sigma", "delta", "c0", "c1", "c2", "c3", "c4", "width", "depth", "train_steps", "step_size", "train_reg", "target_scale"];
const GPUCB_FIELDS: &[&str] = &["delta", "lambda", "ucb_scale", "kernel", "exact_info_gain"];
const SW_GPUCB_FIELDS: &[&str] =
    &["delta", "lambda", "ucb_scale", "window", "kernel", "exact_info_gain"];

impl AlgorithmConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.clone())
    }

    fn set_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.sigma.is_some() {
            out.push("sigma");
        }
        if self.delta.is_some() {
            out.push("delta");
        }
        if self.c0.is_some() {
            out.push("c0");
        }
        if self.c1.is_some() {
            out.push("c1");
        }
        if self.c2.is_some() {
            out.push("c2");
        }
        if self.c3.is_some() {
            out.push("c3");
        }
        if self.c4.is_some() {
            out.push("c4");
        }
        if self.kernel.is_some() {
            out.push("kernel");
        }
        if self.width.is_some() {
            out.push("width");
        }
        if self.depth.is_some() {
            out.push("depth");
        }
        if self.train_steps.is_some() {
            out.push("train_steps");
        }
        if self.step_size.is_some() {
            out.push("step_size");
        }
        if self.train_reg.is_some() {
            out.push("train_reg");
        }
        if self.target_scale.is_some() {
            out.push("target_scale");
        }
        if self.lambda.is_some() {
            out.push("lambda");
        }
        if self.ucb_scale.is_some() {
            out.push("ucb_scale");
        }
        if self.window.is_some() {
            out.push("window");
        }
        if self.exact_info_gain.is_some() {
            out.push("exact_info_gain");
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let allowed: &[&str] = match self.kind.as_str() {
            "opkb" | "ada-opkb" => OP_FIELDS,
            "opnn" | "ada-opnn" => NEURAL_FIELDS,
            "gpucb" => GPUCB_FIELDS,
            "sw-gpucb" => SW_GPUCB_FIELDS,
            other => return Err(Error::Config(format!("unknown algorithm kind `{other}`"))),
        };
        for field in self.set_fields() {
            if !allowed.contains(&field) {
                return Err(Error::Config(format!(
                    "field `{field}` does not apply to algorithm kind `{}`",
                    self.kind
                )));
            }
        }
        if self.kind == "sw-gpucb" && self.window.is_none() {
            return Err(Error::Config("sw-gpucb requires a `window`".into()));
        }
        Ok(())
    }

    fn grid_fields(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let f = |g: &Option<GridF64>| g.as_ref().is_some_and(GridF64::is_grid);
        let u = |g: &Option<GridUsize>| g.as_ref().is_some_and(GridUsize::is_grid);
        if f(&self.sigma) {
            out.push("sigma");
        }
        if f(&self.c0) {
            out.push("c0");
        }
        if f(&self.c1) {
            out.push("c1");
        }
        if f(&self.c2) {
            out.push("c2");
        }
        if f(&self.c3) {
            out.push("c3");
        }
        if f(&self.c4) {
            out.push("c4");
        }
        if u(&self.train_steps) {
            out.push("train_steps");
        }
        if f(&self.step_size) {
            out.push("step_size");
        }
        if f(&self.train_reg) {
            out.push("train_reg");
        }
        if f(&self.lambda) {
            out.push("lambda");
        }
        if f(&self.ucb_scale) {
            out.push("ucb_scale");
        }
        if u(&self.window) {
            out.push("window");
        }
        out
    }

    /// Expands every grid field into singleton configs, labelled with the
    /// varied parameter values.
    pub fn expand(&self) -> Vec<AlgorithmConfig> {
        let varied = self.grid_fields();
        let mut out = vec![self.clone()];
        out = expand_f64(out, &varied, |c| &c.sigma, |c, v| c.sigma = Some(GridF64::One(v)), "sigma");
        out = expand_f64(out, &varied, |c| &c.c0, |c, v| c.c0 = Some(GridF64::One(v)), "c0");
        out = expand_f64(out, &varied, |c| &c.c1, |c, v| c.c1 = Some(GridF64::One(v)), "c1");
        out = expand_f64(out, &varied, |c| &c.c2, |c, v| c.c2 = Some(GridF64::One(v)), "c2");
        out = expand_f64(out, &varied, |c| &c.c3, |c, v| c.c3 = Some(GridF64::One(v)), "c3");
        out = expand_f64(out, &varied, |c| &c.c4, |c, v| c.c4 = Some(GridF64::One(v)), "c4");
        out = expand_usize(
            out,
            &varied,
            |c| &c.train_steps,
            |c, v| c.train_steps = Some(GridUsize::One(v)),
            "train_steps",
        );
        out = expand_f64(out, &varied, |c| &c.step_size, |c, v| c.step_size = Some(GridF64::One(v)), "step_size");
        out = expand_f64(out, &varied, |c| &c.train_reg, |c, v| c.train_reg = Some(GridF64::One(v)), "train_reg");
        out = expand_f64(out, &varied, |c| &c.lambda, |c, v| c.lambda = Some(GridF64::One(v)), "lambda");
        out = expand_f64(out, &varied, |c| &c.ucb_scale, |c, v| c.ucb_scale = Some(GridF64::One(v)), "ucb_scale");
        out = expand_usize(out, &varied, |c| &c.window, |c, v| c.window = Some(GridUsize::One(v)), "window");
        out
    }
}

fn expand_f64(
    configs: Vec<AlgorithmConfig>,
    varied: &[&str],
    get: fn(&AlgorithmConfig) -> &Option<GridF64>,
    set: fn(&mut AlgorithmConfig, f64),
    field: &str,
) -> Vec<AlgorithmConfig> {
    let mut out = Vec::new();
    for cfg in configs {
        match get(&cfg) {
            None => out.push(cfg),
            Some(grid) => {
                for v in grid.values() {
                    let mut c = cfg.clone();
                    set(&mut c, v);
                    if varied.contains(&field) {
                        let name = c.label();
                        c.name = Some(format!("{name}[{field}={v}]"));
                    }
                    out.push(c);
                }
            }
        }
    }
    out
}

fn expand_usize(
    configs: Vec<AlgorithmConfig>,
    varied: &[&str],
    get: fn(&AlgorithmConfig) -> &Option<GridUsize>,
    set: fn(&mut AlgorithmConfig, usize),
    field: &str,
) -> Vec<AlgorithmConfig> {
    let mut out = Vec::new();
    for cfg in configs {
        match get(&cfg) {
            None => out.push(cfg),
            Some(grid) => {
                for v in grid.values() {
                    let mut c = cfg.clone();
                    set(&mut c, v);
                    if varied.contains(&field) {
                        let name = c.label();
                        c.name = Some(format!("{name}[{field}={v}]"));
                    }
                    out.push(c);
                }
            }
        }
    }
    out
}

/// One environment entry of the config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// One of `env1-single-switch`, `env2-two-switches`, `cosine-stationary`,
    /// `cosine-slow`, `gp-custom`.
    pub preset: String,
    pub name: Option<String>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub noise_sd: Option<f64>,
    pub scale: Option<f64>,
    pub lengthscale: Option<f64>,
    /// Switch rounds for the GP presets; defaults scale with the horizon
    /// (`3T/10` for the single switch, `{3T/20, T/2}` for two switches).
    pub switches: Option<Vec<usize>>,
}

impl EnvironmentConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.preset.clone())
    }

    fn validate(&self) -> Result<()> {
        match self.preset.as_str() {
            "env1-single-switch" | "env2-two-switches" | "gp-custom" => {}
            "cosine-stationary" | "cosine-slow" => {
                if self.switches.is_some() || self.lengthscale.is_some() {
                    return Err(Error::Config(format!(
                        "preset `{}` does not take switches or a lengthscale",
                        self.preset
                    )));
                }
            }
            other => return Err(Error::Config(format!("unknown environment preset `{other}`"))),
        }
        if self.preset == "gp-custom" && self.switches.is_none() {
            return Err(Error::Config("gp-custom requires explicit `switches`".into()));
        }
        Ok(())
    }

    /// Materializes the instance for one seed.
    pub fn build(&self, horizon: usize, rng: &mut crate::rng::RunRng) -> Result<BanditInstance> {
        let n = self.n.unwrap_or(100);
        let d = self.d.unwrap_or(5);
        let noise = self.noise_sd.unwrap_or(0.1);
        let scale = self.scale.unwrap_or(0.8);
        match self.preset.as_str() {
            "env1-single-switch" | "env2-two-switches" | "gp-custom" => {
                let kernel = Kernel::rbf(self.lengthscale.unwrap_or(0.2));
                let default_switches = match self.preset.as_str() {
                    "env1-single-switch" => vec![3 * horizon / 10],
                    "env2-two-switches" => vec![3 * horizon / 20, horizon / 2],
                    _ => Vec::new(),
                };
                let switches = self.switches.clone().unwrap_or(default_switches);
                gp_switching_env(d, n, &kernel, &switches, scale, noise, horizon, rng)
            }
            "cosine-stationary" => {
                cosine_env(d, n, &PhaseSchedule::Stationary, scale, noise, horizon, rng)
            }
            "cosine-slow" => {
                cosine_env(d, n, &PhaseSchedule::slow_drift(horizon), scale, noise, horizon, rng)
            }
            other => Err(Error::Config(format!("unknown environment preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub rel_tol: Option<f64>,
    pub max_iters: Option<usize>,
}

impl SolverConfig {
    fn build(&self) -> FwOptions {
        let mut opts = FwOptions::default();
        if let Some(t) = self.rel_tol {
            opts.rel_tol = t;
        }
        if let Some(m) = self.max_iters {
            opts.max_iters = m;
        }
        opts
    }
}

/// Top-level experiment configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Horizon `T`.
    pub t: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// `tuned` (default) or `theory`.
    pub constant_mode: Option<String>,
    pub workers: Option<usize>,
    pub solver: Option<SolverConfig>,
    pub algorithms: Vec<AlgorithmConfig>,
    pub environments: Vec<EnvironmentConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::Config("horizon `t` must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be non-empty".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("at least one algorithm is required".into()));
        }
        if self.environments.is_empty() {
            return Err(Error::Config("at least one environment is required".into()));
        }
        match self.constant_mode.as_deref() {
            None | Some("tuned") | Some("theory") => {}
            Some(other) => {
                return Err(Error::Config(format!("unknown constant mode `{other}`")));
            }
        }
        for a in &self.algorithms {
            a.validate()?;
        }
        let mut labels: Vec<String> = self.algorithms.iter().map(AlgorithmConfig::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.algorithms.len() {
            return Err(Error::Config("algorithm labels must be unique".into()));
        }
        for e in &self.environments {
            e.validate()?;
        }
        Ok(())
    }

    fn has_grids(&self) -> bool {
        self.algorithms.iter().any(|a| !a.grid_fields().is_empty())
    }

    fn solver_options(&self) -> FwOptions {
        self.solver.as_ref().map_or_else(FwOptions::default, SolverConfig::build)
    }

    fn theory_mode(&self) -> bool {
        self.constant_mode.as_deref() == Some("theory")
    }
}

/// Outcome of one `(algorithm, environment, seed)` cell.
#[derive(Debug)]
pub struct CellResult {
    pub algorithm: String,
    pub environment: String,
    pub seed: u64,
    pub outcome: Result<CellOutcome>,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub trace: RegretTrace,
    pub restarts: usize,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub environment: String,
    pub checkpoint: usize,
    pub mean_cum_regret: f64,
    /// Sample standard error; `None` with fewer than two seeds.
    pub stderr_cum_regret: Option<f64>,
    pub n_seeds: usize,
    pub mean_restarts: f64,
}

/// Aggregated results of an experiment.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub summary: Vec<SummaryRow>,
    pub cells: Vec<CellResult>,
    pub summary_path: PathBuf,
}

impl ExperimentOutput {
    pub fn failed_cells(&self) -> Vec<String> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.outcome.as_ref().err().map(|e| {
                    format!("{}/{}/seed{}: {e}", c.algorithm, c.environment, c.seed)
                })
            })
            .collect()
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

/// Trace file name for a cell.
pub fn trace_file_name(algorithm: &str, environment: &str, seed: u64) -> String {
    format!("trace_{}_{}_seed{}.csv", sanitize(algorithm), sanitize(environment), seed)
}

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes a trace in the fixed column order.
pub fn trace_to_csv(trace: &RegretTrace) -> String {
    let mut out = String::with_capacity(trace.len() * 48 + 64);
    out.push_str("t,epoch,block,strategy_index,action,reward,inst_regret,cum_regret,restart_flag\n");
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.t,
            r.epoch,
            r.block,
            r.strategy_index,
            r.action,
            r.reward,
            r.inst_regret,
            r.cum_regret,
            u8::from(r.restarted)
        );
    }
    out
}

/// Parses a trace CSV produced by [`trace_to_csv`].
pub fn trace_from_csv(text: &str) -> Result<RegretTrace> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(Error::Config(format!("trace line {i} has {} fields", parts.len())));
        }
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| Error::Config(e.to_string()));
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Config(e.to_string()));
        rows.push(crate::envs::TraceRow {
            t: parse_u(parts[0])?,
            epoch: parse_u(parts[1])?,
            block: parse_u(parts[2])?,
            strategy_index: parse_u(parts[3])?,
            action: parse_u(parts[4])?,
            reward: parse_f(parts[5])?,
            inst_regret: parse_f(parts[6])?,
            cum_regret: parse_f(parts[7])?,
            restarted: parts[8] == "1",
        });
    }
    Ok(RegretTrace { rows })
}

/// Checkpoints `{T/10, 2T/10, ..., T}` (deduplicated for tiny horizons).
pub fn checkpoints(t: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=10).map(|k| (k * t) / 10).filter(|&c| c >= 1).collect();
    out.dedup();
    out
}

struct ResolvedCell {
    algorithm: AlgorithmConfig,
    environment: EnvironmentConfig,
    seed: u64,
}

fn run_cell(
    cell: &ResolvedCell,
    horizon: usize,
    theory: bool,
    solver: &FwOptions,
) -> Result<CellOutcome> {
    let mut env_rng = stream(cell.seed, streams::ENVIRONMENT);
    let instance = cell.environment.build(horizon, &mut env_rng)?;
    let mut learner_rng = stream(cell.seed, streams::LEARNER);
    let a = &cell.algorithm;
    let delta = a.delta.unwrap_or(0.05);

    let op_constants = |a: &AlgorithmConfig| -> Result<[f64; 5]> {
        let d = DEFAULT_TUNED_CONSTANTS;
        Ok([
            a.c0.as_ref().map_or(Ok(d[0]), |g| g.single("c0"))?,
            a.c1.as_ref().map_or(Ok(d[1]), |g| g.single("c1"))?,
            a.c2.as_ref().map_or(Ok(d[2]), |g| g.single("c2"))?,
            a.c3.as_ref().map_or(Ok(d[3]), |g| g.single("c3"))?,
            a.c4.as_ref().map_or(Ok(d[4]), |g| g.single("c4"))?,
        ])
    };
    let op_params = |gamma: f64, n: usize, sigma: f64| -> Result<AlgoParams> {
        let p = if theory {
            AlgoParams::theory(sigma, delta, horizon, n, gamma)?
        } else {
            AlgoParams::tuned(sigma, delta, horizon, n, gamma, op_constants(a)?)?
        };
        Ok(p.with_solver(solver.clone()))
    };

    match a.kind.as_str() {
        "opkb" | "ada-opkb" => {
            let kernel = a.kernel.clone().unwrap_or_default().build()?;
            let k = gram(&kernel, &instance.actions)?;
            let map = cholesky_feature_map(&k, DEFAULT_JITTER)?;
            let sigma = a.sigma.as_ref().map_or(Ok(1.0), |g| g.single("sigma"))?;
            let gamma = info_gain(&map, horizon as f64, sigma, solver)?.gamma;
            let params = op_params(gamma, instance.actions.len(), sigma)?;
            let out = if a.kind == "opkb" {
                opkb_run(&instance.env, &map, &params, &mut learner_rng)?
            } else {
                let mut sched_rng = stream(cell.seed, streams::SCHEDULER);
                ada_opkb_run(&instance.env, &map, &params, &mut learner_rng, &mut sched_rng)?
            };
            Ok(CellOutcome { trace: out.trace, restarts: out.epochs.n_restarts() })
        }
        "opnn" | "ada-opnn" => {
            let neural = NeuralConfig {
                width: a.width.unwrap_or(256),
                depth: a.depth.unwrap_or(3),
                train_steps: a.train_steps.as_ref().map_or(Ok(100), |g| g.single("train_steps"))?,
                step_size: a.step_size.as_ref().map_or(Ok(1e-7), |g| g.single("step_size"))?,
                train_reg: a.train_reg.as_ref().map_or(Ok(1.0), |g| g.single("train_reg"))?,
                jitter: DEFAULT_JITTER,
                target_scale: a.target_scale.unwrap_or(1.0),
            };
            let mut net_rng = stream(cell.seed, streams::NETWORK);
            let mut provider =
                NeuralFeatureProvider::new(instance.actions.clone(), neural, &mut net_rng)?;
            let map0 = provider.initial_feature_map()?;
            let sigma = a.sigma.as_ref().map_or(Ok(1.0), |g| g.single("sigma"))?;
            let gamma = info_gain(&map0, horizon as f64, sigma, solver)?.gamma;
            let params = op_params(gamma, instance.actions.len(), sigma)?;
            let out = if a.kind == "opnn" {
                opnn_run(&instance.env, &mut provider, &params, &mut learner_rng)?
            } else {
                let mut sched_rng = stream(cell.seed, streams::SCHEDULER);
                ada_opnn_run(&instance.env, &mut provider, &params, &mut learner_rng, &mut sched_rng)?
            };
            Ok(CellOutcome { trace: out.trace, restarts: out.epochs.n_restarts() })
        }
        "gpucb" | "sw-gpucb" => {
            let kernel = a.kernel.clone().unwrap_or_default().build()?;
            let k = gram(&kernel, &instance.actions)?;
            let map = cholesky_feature_map(&k, DEFAULT_JITTER)?;
            let window = match a.kind.as_str() {
                "sw-gpucb" => Some(a.window.as_ref().unwrap().single("window")?),
                _ => None,
            };
            let config = GpucbConfig {
                lambda: a.lambda.as_ref().map_or(Ok(1.0), |g| g.single("lambda"))?,
                ucb_scale: a.ucb_scale.as_ref().map_or(Ok(1.0), |g| g.single("ucb_scale"))?,
                delta,
                window,
                exact_info_gain: a.exact_info_gain.unwrap_or(false),
                solver: solver.clone(),
            };
            let trace = gpucb_run(&instance.env, &map, &config, horizon)?;
            Ok(CellOutcome { trace, restarts: 0 })
        }
        other => Err(Error::Config(format!("unknown algorithm kind `{other}`"))),
    }
}

fn summarize(
    cells: &[CellResult],
    horizon: usize,
) -> Vec<SummaryRow> {
    let points = checkpoints(horizon);
    let mut groups: BTreeMap<(String, String), Vec<&CellOutcome>> = BTreeMap::new();
    for cell in cells {
        if let Ok(outcome) = &cell.outcome {
            groups
                .entry((cell.algorithm.clone(), cell.environment.clone()))
                .or_default()
                .push(outcome);
        }
    }
    let mut rows = Vec::new();
    for ((algo, env), outcomes) in groups {
        let n = outcomes.len();
        let mean_restarts =
            outcomes.iter().map(|o| o.restarts as f64).sum::<f64>() / n as f64;
        for &cp in &points {
            let values: Vec<f64> = outcomes.iter().map(|o| o.trace.cum_regret_at(cp)).collect();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = if n >= 2 {
                let var =
                    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
                Some((var / n as f64).sqrt())
            } else {
                None
            };
            rows.push(SummaryRow {
                algorithm: algo.clone(),
                environment: env.clone(),
                checkpoint: cp,
                mean_cum_regret: mean,
                stderr_cum_regret: stderr,
                n_seeds: n,
                mean_restarts,
            });
        }
    }
    rows
}

fn summary_to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(
        "algorithm,environment,checkpoint_t,mean_cum_regret,stderr_cum_regret,n_seeds,mean_restarts\n",
    );
    for r in rows {
        let stderr = r.stderr_cum_regret.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.algorithm,
            r.environment,
            r.checkpoint,
            r.mean_cum_regret,
            stderr,
            r.n_seeds,
            r.mean_restarts
        );
    }
    out
}

fn worker_pool(config_workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let from_env = std::env::var(WORKERS_ENV_VAR).ok().and_then(|v| v.parse::<usize>().ok());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config_workers.or(from_env) {
        builder = builder.num_threads(w.max(1));
    }
    builder.build().map_err(|e| Error::Config(format!("failed to build worker pool: {e}")))
}

fn execute(
    config: &ExperimentConfig,
    algorithms: &[AlgorithmConfig],
    summary_name: &str,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let solver = config.solver_options();
    let theory = config.theory_mode();
    fs::create_dir_all(&config.output_dir)?;

    let mut cells: Vec<ResolvedCell> = Vec::new();
    for algo in algorithms {
        for env in &config.environments {
            for &seed in &config.seeds {
                cells.push(ResolvedCell {
                    algorithm: algo.clone(),
                    environment: env.clone(),
                    seed,
                });
            }
        }
    }

    let pool = worker_pool(config.workers)?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let outcome = run_cell(cell, config.t, theory, &solver).and_then(|out| {
                    let name = trace_file_name(
                        &cell.algorithm.label(),
                        &cell.environment.label(),
                        cell.seed,
                    );
                    atomic_write(&config.output_dir.join(name), &trace_to_csv(&out.trace))?;
                    Ok(out)
                });
                CellResult {
                    algorithm: cell.algorithm.label(),
                    environment: cell.environment.label(),
                    seed: cell.seed,
                    outcome,
                }
            })
            .collect()
    });

    let summary = summarize(&results, config.t);
    let summary_path = config.output_dir.join(summary_name);
    atomic_write(&summary_path, &summary_to_csv(&summary))?;
    Ok(ExperimentOutput { summary, cells: results, summary_path })
}

/// Runs every `(algorithm, environment, seed)` cell of the config, writing
/// one trace CSV per cell and a summary CSV.
///
/// Grid-valued parameters are rejected; use [`grid_search`].
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    if config.has_grids() {
        return Err(Error::Config(
            "config contains parameter grids; run the grid command instead".into(),
        ));
    }
    execute(config, &config.algorithms, "summary.csv")
}

/// One leaderboard entry of a grid search.
#[derive(Debug, Clone)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub algorithm: String,
    pub mean_final_regret: f64,
    pub stderr_final_regret: Option<f64>,
    pub n_cells: usize,
}

/// Output of [`grid_search`].
#[derive(Debug)]
pub struct GridOutput {
    pub leaderboard: Vec<LeaderboardRow>,
    pub experiment: ExperimentOutput,
    pub leaderboard_path: PathBuf,
}

/// Expands every parameter grid, runs all resulting configurations and
/// ranks them by mean cumulative regret at the horizon (averaged over all
/// environment/seed cells). Ties rank by label for determinism.
pub fn grid_search(config: &ExperimentConfig) -> Result<GridOutput> {
    let expanded: Vec<AlgorithmConfig> =
        config.algorithms.iter().flat_map(AlgorithmConfig::expand).collect();
    let experiment = execute(config, &expanded, "grid_summary.csv")?;

    let mut by_algo: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for cell in &experiment.cells {
        if let Ok(outcome) = &cell.outcome {
            by_algo
                .entry(cell.algorithm.clone())
                .or_default()
                .push(outcome.trace.final_cum_regret());
        }
    }
    let mut entries: Vec<(String, f64, Option<f64>, usize)> = by_algo
        .into_iter()
        .map(|(label, finals)| {
            let n = finals.len();
            let mean = finals.iter().sum::<f64>() / n as f64;
            let stderr = if n >= 2 {
                let var = finals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (n as f64 - 1.0);
                Some((var / n as f64).sqrt())
            } else {
                None
            };
            (label, mean, stderr, n)
        })
        .collect();
    entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));

    let leaderboard: Vec<LeaderboardRow> = entries
        .into_iter()
        .enumerate()
        .map(|(i, (algorithm, mean, stderr, n))| LeaderboardRow {
            rank: i + 1,
            algorithm,
            mean_final_regret: mean,
            stderr_final_regret: stderr,
            n_cells: n,
        })
        .collect();

    let mut csv = String::from("rank,algorithm,mean_final_regret,stderr_final_regret,n_cells\n");
    for r in &leaderboard {
        let stderr = r.stderr_final_regret.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(csv, "{},{},{},{},{}", r.rank, r.algorithm, r.mean_final_regret, stderr, r.n_cells);
    }
    let leaderboard_path = config.output_dir.join("leaderboard.csv");
    atomic_write(&leaderboard_path, &csv)?;

    Ok(GridOutput { leaderboard, experiment, leaderboard_path })
}
