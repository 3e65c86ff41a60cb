//! The OPKB block loop, the replay scheduler, the restart test and the
//! adaptive ADA-OPKB epoch loop.
//!
//! OPKB runs in blocks of doubling length. Block 0 plays the optimal design;
//! before each later block `j` it computes empirical gaps over everything
//! played so far, solves OP with exploitation weight `beta_j` (growing by
//! `sqrt 2` per block), and mixes the result with the optimal design at rate
//! `mu_j` (shrinking by `sqrt 2` per block).
//!
//! ADA-OPKB wraps the same loop in epochs. Each block draws a randomized
//! schedule of replay intervals; inside a replay interval the strategy of an
//! earlier block is played again, which makes its gap estimates comparable
//! with the historical ones. When a replay interval ends, the change
//! detection test compares its gap estimates against every completed
//! cumulative block; a significant discrepancy triggers a restart, which
//! clears all history and begins a new epoch at the next round.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;

use crate::design::{op_solve, optimal_design, FwOptions, Strategy};
use crate::envs::{Environment, RegretTrace, TraceRow};
use crate::error::{Error, Result};
use crate::estimation::{GapEstimates, IpsScorer, RoundRecord};
use crate::kernels::FeatureMap;
use crate::rng::RunRng;

/// Constant mode: values carried by the optimality analysis, or free
/// constants in the spirit of a tuning grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstantMode {
    Theory,
    Tuned,
}

/// Algorithm parameters shared by OPKB, ADA-OPKB and the neural variants.
///
/// Derived quantities:
///
/// * `mu_j = c1 * 2^{-j/2}` — exploration mix of block `j`,
/// * `beta_j = c2 * gamma * 2^{j/2}` — exploitation weight of block `j`,
/// * `E = ceil(c3 * gamma * ln(C0 N / delta))` — base block length,
/// * `alpha = c4 * sigma / ln(C0 N / delta)` — good-arm threshold scale,
///
/// with `C0 = 8 T log2 T`. `gamma` is the maximum information gain of the
/// governing feature map, computed once and reused everywhere.
#[derive(Debug, Clone)]
pub struct AlgoParams {
    pub sigma: f64,
    pub delta: f64,
    pub horizon: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub mode: ConstantMode,
    c: [f64; 5],
    pub solver: FwOptions,
}

impl AlgoParams {
    /// Constants from the optimality analysis: `c1 = 1/2`, `c3 = 4`,
    /// `c4 = 1/4`, `c0 = 40 + 16 sqrt(alpha)`, `c2 = 1 / (10 + 4 sqrt(alpha))`.
    pub fn theory(
        sigma: f64,
        delta: f64,
        horizon: usize,
        n_actions: usize,
        gamma: f64,
    ) -> Result<Self> {
        let mut p = Self {
            sigma,
            delta,
            horizon,
            n_actions,
            gamma,
            mode: ConstantMode::Theory,
            c: [0.0, 0.5, 0.0, 4.0, 0.25],
            solver: FwOptions::default(),
        };
        p.validate_base()?;
        let alpha = p.alpha();
        p.c[0] = 40.0 + 16.0 * alpha.sqrt();
        p.c[2] = 1.0 / (10.0 + 4.0 * alpha.sqrt());
        Ok(p)
    }

    /// Free constants `[c0, c1, c2, c3, c4]`.
    pub fn tuned(
        sigma: f64,
        delta: f64,
        horizon: usize,
        n_actions: usize,
        gamma: f64,
        c: [f64; 5],
    ) -> Result<Self> {
        let p = Self {
            sigma,
            delta,
            horizon,
            n_actions,
            gamma,
            mode: ConstantMode::Tuned,
            c,
            solver: FwOptions::default(),
        };
        p.validate_base()?;
        if c.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput("constants c0..c4 must be positive".into()));
        }
        if c[1] >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "c1 must lie in (0, 1) so that every mu_j is a valid mixing weight, got {}",
                c[1]
            )));
        }
        Ok(p)
    }

    fn validate_base(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.horizon < 1 {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        if self.n_actions < 1 {
            return Err(Error::InvalidInput("need at least one action".into()));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "information gain must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn with_solver(mut self, solver: FwOptions) -> Self {
        self.solver = solver;
        self
    }

    pub fn constant(&self, i: usize) -> f64 {
        self.c[i]
    }

    /// `ln(C0 N / delta)` with `C0 = 8 T log2 T`.
    pub fn log_term(&self) -> f64 {
        let t = self.horizon as f64;
        let c0 = 8.0 * t * t.log2().max(1.0);
        (c0 * self.n_actions as f64 / self.delta).ln()
    }

    pub fn alpha(&self) -> f64 {
        self.c[4] * self.sigma / self.log_term()
    }

    /// Exploration mix of block `j`.
    pub fn mu(&self, j: usize) -> f64 {
        self.c[1] * 2f64.powf(-(j as f64) / 2.0)
    }

    /// Exploitation weight of block `j`.
    pub fn beta(&self, j: usize) -> f64 {
        self.c[2] * self.gamma * 2f64.powf(j as f64 / 2.0)
    }

    /// Base block length `E`.
    pub fn block_base(&self) -> usize {
        ((self.c[3] * self.gamma * self.log_term()).ceil() as usize).max(1)
    }

    /// Scheduled length of block `j`.
    pub fn block_len(&self, j: usize) -> usize {
        (1usize << j) * self.block_base()
    }
}

/// A scheduled replay of the strategy of block `index` over `[start, end]`
/// (inclusive, absolute rounds).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayInterval {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl ReplayInterval {
    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Draws the replay schedule for block `j` starting at round `t_start`.
///
/// The schedule always contains the base interval `(j, [t, t + 2^j E - 1])`.
/// For every lower index `m < j`, each of the `2^{j-m}` aligned slots of
/// length `2^m E` is included independently with probability
/// `sqrt(2^{m-j})`. Coins are drawn in index-major order (`m` ascending,
/// slots ascending), which fixes the stream consumption for reproducibility.
pub fn schedule(t_start: usize, j: usize, e_base: usize, rng: &mut impl Rng) -> Vec<ReplayInterval> {
    let block_len = (1usize << j) * e_base;
    let mut out = vec![ReplayInterval { index: j, start: t_start, end: t_start + block_len - 1 }];
    for m in 0..j {
        let slot_len = (1usize << m) * e_base;
        let slots = 1usize << (j - m);
        let p = 2f64.powf((m as f64 - j as f64) / 2.0);
        for s in 0..slots {
            if rng.random_bool(p) {
                let start = t_start + s * slot_len;
                out.push(ReplayInterval { index: m, start, end: start + slot_len - 1 });
            }
        }
    }
    out
}

/// Which side of the change-detection inequality fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestartSide {
    /// The replay interval's gap exceeded the historical one.
    IntervalExceedsHistory,
    /// The historical gap exceeded the replay interval's one.
    HistoryExceedsInterval,
}

/// Records what triggered a restart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestartCause {
    /// Round at which the test fired.
    pub t: usize,
    /// Action achieving the violated inequality.
    pub action: usize,
    /// Replay index `m` of the ending interval.
    pub replay_index: usize,
    /// Cumulative block index `k` used for comparison.
    pub history_index: usize,
    pub side: RestartSide,
}

/// Change-detection test run when replay intervals end.
///
/// For every ending interval `(m, I)` and every completed cumulative block
/// `k < j`, a restart triggers if for some action `x`
///
/// ```text
/// gap_I(x) - 4 gap_C(k)(x) > 4 c0 mu_{min(m,k)}   or
/// gap_C(k)(x) - 4 gap_I(x) > 4 c0 mu_{min(m,k)}.
/// ```
///
/// Returns the first violation in deterministic order (ending intervals in
/// the given order, then `k` ascending, then actions ascending).
pub fn restart_test(
    ending: &[(&ReplayInterval, &GapEstimates)],
    history: &[(usize, &GapEstimates)],
    params: &AlgoParams,
) -> Option<RestartCause> {
    for (interval, gap_i) in ending {
        for (k, gap_c) in history {
            let threshold = 4.0 * params.constant(0) * params.mu(interval.index.min(*k));
            for x in 0..gap_i.gaps.len() {
                if gap_i.gaps[x] - 4.0 * gap_c.gaps[x] > threshold {
                    return Some(RestartCause {
                        t: interval.end,
                        action: x,
                        replay_index: interval.index,
                        history_index: *k,
                        side: RestartSide::IntervalExceedsHistory,
                    });
                }
                if gap_c.gaps[x] - 4.0 * gap_i.gaps[x] > threshold {
                    return Some(RestartCause {
                        t: interval.end,
                        action: x,
                        replay_index: interval.index,
                        history_index: *k,
                        side: RestartSide::HistoryExceedsInterval,
                    });
                }
            }
        }
    }
    None
}

/// Supplies the feature map for each block. A fixed kernel map ignores the
/// history; the neural provider retrains a network on it.
pub trait FeatureProvider {
    /// Map used by block 0 of every epoch.
    fn initial_map(&mut self) -> Result<Arc<FeatureMap>>;

    /// Map for block `j >= 1`, given the records of the current epoch.
    fn block_map(&mut self, j: usize, records: &[RoundRecord]) -> Result<Arc<FeatureMap>>;

    /// True when every block is guaranteed to use the same map, enabling
    /// cache reuse across blocks.
    fn is_constant(&self) -> bool;
}

/// Provider for a fixed feature map (OPKB / ADA-OPKB).
pub struct FixedFeatures {
    map: Arc<FeatureMap>,
}

impl FixedFeatures {
    pub fn new(map: FeatureMap) -> Self {
        Self { map: Arc::new(map) }
    }
}

impl FeatureProvider for FixedFeatures {
    fn initial_map(&mut self) -> Result<Arc<FeatureMap>> {
        Ok(Arc::clone(&self.map))
    }

    fn block_map(&mut self, _j: usize, _records: &[RoundRecord]) -> Result<Arc<FeatureMap>> {
        Ok(Arc::clone(&self.map))
    }

    fn is_constant(&self) -> bool {
        true
    }
}

/// Estimate snapshot taken at the end of a completed block.
#[derive(Debug, Clone)]
pub struct BlockDiag {
    pub epoch: usize,
    pub block: usize,
    /// First and last round actually played in the block.
    pub start: usize,
    pub end: usize,
    /// Reward estimates over the cumulative block `C(j)` of this epoch.
    pub reward_estimates: Vec<f64>,
    /// Gap estimates over the same interval.
    pub gaps: Vec<f64>,
    /// Feature map in force during this block.
    pub map: Arc<FeatureMap>,
    /// Mixed strategy played by this block (outside replays).
    pub strategy: Arc<Strategy>,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    /// Present when the epoch ended with a detected change.
    pub restart: Option<RestartCause>,
}

/// Epoch boundaries and restart causes of an adaptive run.
#[derive(Debug, Clone, Default)]
pub struct EpochLog {
    pub epochs: Vec<EpochRecord>,
}

impl EpochLog {
    pub fn n_restarts(&self) -> usize {
        self.epochs.iter().filter(|e| e.restart.is_some()).count()
    }
}

/// Full output of a run: the regret trace, epoch bookkeeping, per-block
/// estimate snapshots and the count of clamped rewards.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: RegretTrace,
    pub epochs: EpochLog,
    pub blocks: Vec<BlockDiag>,
    pub clamped_rewards: u64,
}

/// Prefix sums of per-round estimate vectors; any interval mean is two
/// lookups.
struct EstimateStore {
    prefix: Vec<DVector<f64>>,
}

impl EstimateStore {
    fn new(n: usize) -> Self {
        Self { prefix: vec![DVector::zeros(n)] }
    }

    fn len(&self) -> usize {
        self.prefix.len() - 1
    }

    fn push(&mut self, v: &DVector<f64>) {
        let next = self.prefix.last().unwrap() + v;
        self.prefix.push(next);
    }

    /// Mean over local (0-based) rounds `[a, b]`, inclusive.
    fn interval_mean(&self, a: usize, b: usize) -> DVector<f64> {
        debug_assert!(a <= b && b < self.len());
        (&self.prefix[b + 1] - &self.prefix[a]) / (b - a + 1) as f64
    }

    fn interval_gaps(&self, a: usize, b: usize, start_t: usize, end_t: usize) -> GapEstimates {
        let mean = self.interval_mean(a, b);
        let max = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        GapEstimates { start: start_t, end: end_t, gaps: mean.iter().map(|v| max - v).collect() }
    }
}

/// Runs OPKB: the block loop with a fixed feature map and no change
/// detection.
pub fn opkb_run(
    env: &Environment,
    map: &FeatureMap,
    params: &AlgoParams,
    rng: &mut RunRng,
) -> Result<RunOutput> {
    let mut provider = FixedFeatures::new(map.clone());
    run_with_provider(env, &mut provider, params, rng, None)
}

/// Runs ADA-OPKB: the epoch loop with replay scheduling and change
/// detection.
pub fn ada_opkb_run(
    env: &Environment,
    map: &FeatureMap,
    params: &AlgoParams,
    rng: &mut RunRng,
    scheduler_rng: &mut RunRng,
) -> Result<RunOutput> {
    let mut provider = FixedFeatures::new(map.clone());
    run_with_provider(env, &mut provider, params, rng, Some(scheduler_rng))
}

/// Generic block/epoch engine. `scheduler_rng: Some(..)` selects the
/// adaptive variant; `None` runs the plain block loop.
pub fn run_with_provider<P: FeatureProvider>(
    env: &Environment,
    provider: &mut P,
    params: &AlgoParams,
    learner_rng: &mut RunRng,
    mut scheduler_rng: Option<&mut RunRng>,
) -> Result<RunOutput> {
    let n = params.n_actions;
    if env.n_actions() != n {
        return Err(Error::Shape(format!(
            "environment has {} actions but params expect {n}",
            env.n_actions()
        )));
    }
    let e_base = params.block_base();
    if env.horizon() < e_base {
        return Err(Error::InvalidInput(format!(
            "environment horizon {} is shorter than the base block length {e_base}",
            env.horizon()
        )));
    }
    let t_eff = params.horizon.min(env.horizon());
    let adaptive = scheduler_rng.is_some();
    let sigma = params.sigma;
    let horizon_f = params.horizon as f64;

    let mut rows: Vec<TraceRow> = Vec::with_capacity(t_eff);
    let mut blocks: Vec<BlockDiag> = Vec::new();
    let mut epochs = EpochLog::default();
    let mut clamped: u64 = 0;
    let mut cum_regret = 0.0;

    let mut t = 1usize;
    let mut epoch = 1usize;

    while t <= t_eff {
        let epoch_start = t;
        // Per-epoch state; all of it is dropped on restart.
        let mut maps: Vec<Arc<FeatureMap>> = Vec::new();
        let mut strategies: Vec<Arc<Strategy>> = Vec::new();
        let mut records: Vec<RoundRecord> = Vec::new();
        // Estimates of each round under the map/strategy pair it was played
        // with; feeds the gap estimates for OP.
        let mut paired = EstimateStore::new(n);
        // Estimates of each round rescored under the current block's map;
        // feeds the restart test when the map changes across blocks.
        let mut rescored = EstimateStore::new(n);
        let mut design_cache: Option<Arc<Strategy>> = None;
        let mut restart: Option<RestartCause> = None;

        let mut j = 0usize;
        'blocks: while t <= t_eff {
            let block_start = t;
            let block_end = (block_start + params.block_len(j) - 1).min(t_eff);

            let map_j = if j == 0 {
                provider.initial_map()?
            } else {
                provider.block_map(j, &records)?
            };

            // Optimal design on the full action set under this block's map.
            let design = match (&design_cache, provider.is_constant()) {
                (Some(d), true) => Arc::clone(d),
                _ => {
                    let (d, _) = optimal_design(
                        &map_j,
                        &(0..n).collect::<Vec<_>>(),
                        sigma,
                        horizon_f,
                        &params.solver,
                    )?;
                    let d = Arc::new(d);
                    design_cache = Some(Arc::clone(&d));
                    d
                }
            };

            let strategy = if j == 0 {
                Arc::clone(&design)
            } else {
                let gaps = paired.interval_gaps(0, paired.len() - 1, epoch_start, t - 1);
                let sol = op_solve(
                    &map_j,
                    &gaps.gaps,
                    params.alpha(),
                    params.beta(j),
                    horizon_f,
                    sigma,
                    params.gamma,
                    &params.solver,
                )?;
                Arc::new(sol.q.mix(&design, params.mu(j))?)
            };
            maps.push(Arc::clone(&map_j));
            strategies.push(Arc::clone(&strategy));

            // Estimate scorers. Paired scorers live per strategy index and
            // are built lazily when a replay first selects that index.
            let mut paired_scorers: Vec<Option<IpsScorer>> = (0..=j).map(|_| None).collect();
            paired_scorers[j] = Some(IpsScorer::new(&map_j, &strategy, sigma, horizon_f)?);
            let mut rescore_scorers: Vec<IpsScorer> = Vec::new();
            if adaptive && !provider.is_constant() {
                // Rescore the whole epoch so far under this block's map.
                for other in strategies.iter().take(j + 1) {
                    rescore_scorers.push(IpsScorer::new(&map_j, other, sigma, horizon_f)?);
                }
                rescored = EstimateStore::new(n);
                for rec in &records {
                    let est =
                        rescore_scorers[rec.strategy_index].round_estimates(rec.action, rec.reward);
                    rescored.push(&est);
                }
            }

            let block_schedule = match scheduler_rng.as_deref_mut() {
                Some(rng) => schedule(block_start, j, e_base, rng),
                None => Vec::new(),
            };

            // Gap estimates over each completed cumulative block C(k), under
            // the current block's map, for the restart test.
            let history_gaps: Vec<(usize, GapEstimates)> = if adaptive && j >= 1 {
                let store = if provider.is_constant() { &paired } else { &rescored };
                (0..j)
                    .map(|k| {
                        let end_local = (((1usize << (k + 1)) - 1) * e_base - 1).min(store.len() - 1);
                        (k, store.interval_gaps(0, end_local, epoch_start, epoch_start + end_local))
                    })
                    .collect()
            } else {
                Vec::new()
            };

            while t <= block_end {
                let m_t = if adaptive {
                    block_schedule
                        .iter()
                        .filter(|iv| iv.contains(t))
                        .map(|iv| iv.index)
                        .min()
                        .unwrap_or(j)
                } else {
                    j
                };
                let p_t = Arc::clone(&strategies[m_t]);
                let action = p_t.sample(learner_rng);
                let y = env.observe(t, action);
                let (rec, was_clamped) = RoundRecord::new(t, action, y, m_t, Arc::clone(&p_t));
                if was_clamped {
                    clamped += 1;
                }

                if paired_scorers[m_t].is_none() {
                    paired_scorers[m_t] =
                        Some(IpsScorer::new(&maps[m_t], &strategies[m_t], sigma, horizon_f)?);
                }
                let est =
                    paired_scorers[m_t].as_ref().unwrap().round_estimates(rec.action, rec.reward);
                paired.push(&est);
                if adaptive && !provider.is_constant() {
                    let est = rescore_scorers[m_t].round_estimates(rec.action, rec.reward);
                    rescored.push(&est);
                }
                records.push(rec);

                let inst = env.best_reward(t) - env.reward(t, action);
                cum_regret += inst;

                let mut restarted = false;
                if adaptive && j >= 1 {
                    let ending: Vec<&ReplayInterval> =
                        block_schedule.iter().filter(|iv| iv.end == t).collect();
                    if !ending.is_empty() {
                        let store = if provider.is_constant() { &paired } else { &rescored };
                        let ending_gaps: Vec<GapEstimates> = ending
                            .iter()
                            .map(|iv| {
                                let a = iv.start - epoch_start;
                                let b = iv.end - epoch_start;
                                store.interval_gaps(a, b, iv.start, iv.end)
                            })
                            .collect();
                        let pairs: Vec<(&ReplayInterval, &GapEstimates)> =
                            ending.iter().copied().zip(ending_gaps.iter()).collect();
                        let history: Vec<(usize, &GapEstimates)> =
                            history_gaps.iter().map(|(k, g)| (*k, g)).collect();
                        if let Some(cause) = restart_test(&pairs, &history, params) {
                            restart = Some(cause);
                            restarted = true;
                        }
                    }
                }

                rows.push(TraceRow {
                    t,
                    epoch,
                    block: j,
                    strategy_index: m_t,
                    action,
                    reward: y,
                    inst_regret: inst,
                    cum_regret,
                    restarted,
                });
                t += 1;
                if restarted {
                    break 'blocks;
                }
            }

            // Snapshot estimates over the cumulative block C(j) under the
            // paired map/strategy of each round.
            let gaps = paired.interval_gaps(0, paired.len() - 1, epoch_start, t - 1);
            let means = paired.interval_mean(0, paired.len() - 1);
            blocks.push(BlockDiag {
                epoch,
                block: j,
                start: block_start,
                end: t - 1,
                reward_estimates: means.iter().copied().collect(),
                gaps: gaps.gaps,
                map: Arc::clone(&map_j),
                strategy: Arc::clone(&strategy),
            });
            j += 1;
        }

        epochs.epochs.push(EpochRecord {
            index: epoch,
            start: epoch_start,
            end: t - 1,
            restart: restart.clone(),
        });
        if restart.is_some() {
            epoch += 1;
        } else {
            break;
        }
    }

    Ok(RunOutput { trace: RegretTrace { rows }, epochs, blocks, clamped_rewards: clamped })
}
