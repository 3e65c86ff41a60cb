//! Simulated non-stationary environments and regret accounting.
//!
//! An [`Environment`] holds a fully materialized reward schedule (one
//! length-`N` reward vector per round), pre-sampled zero-mean Gaussian noise,
//! and the ground-truth non-stationarity budgets derived from the schedule:
//! the total variation `V_T` and the number of reward changes `L_T`. The
//! schedule and the noise are fixed before any interaction, so the adversary
//! is oblivious; observations are clamped into `[-1, 1]` and clamping events
//! are counted.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{cholesky_feature_map, gram, ActionSet, Kernel, DEFAULT_JITTER};

/// A fixed reward schedule with per-round noise.
#[derive(Debug)]
pub struct Environment {
    rewards: Vec<DVector<f64>>,
    noise: Vec<f64>,
    v_budget: f64,
    l_budget: usize,
    clamp_count: AtomicU64,
}

impl Environment {
    /// Builds an environment from an explicit schedule, drawing one noise
    /// value per round from `N(0, noise_sd^2)`.
    pub fn from_schedule(
        rewards: Vec<DVector<f64>>,
        noise_sd: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::InvalidInput("schedule must cover at least one round".into()));
        }
        let n = rewards[0].len();
        if n == 0 || rewards.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("all reward vectors must have the same positive length".into()));
        }
        if rewards.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("reward schedule has non-finite entries".into()));
        }
        let noise = if noise_sd > 0.0 {
            let dist = Normal::new(0.0, noise_sd)
                .map_err(|e| Error::InvalidInput(format!("bad noise sd: {e}")))?;
            (0..rewards.len()).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; rewards.len()]
        };
        let (v_budget, l_budget) = budgets(&rewards);
        Ok(Self { rewards, noise, v_budget, l_budget, clamp_count: AtomicU64::new(0) })
    }

    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    pub fn n_actions(&self) -> usize {
        self.rewards[0].len()
    }

    /// Noiseless reward `r_t(x)`; `t` is 1-based.
    pub fn reward(&self, t: usize, action: usize) -> f64 {
        self.rewards[t - 1][action]
    }

    /// Best noiseless reward at round `t`.
    pub fn best_reward(&self, t: usize) -> f64 {
        self.rewards[t - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Observation `y_t = r_t(x) + eta_t`, clamped into `[-1, 1]`.
    pub fn observe(&self, t: usize, action: usize) -> f64 {
        let raw = self.reward(t, action) + self.noise[t - 1];
        let y = raw.clamp(-1.0, 1.0);
        if y != raw {
            self.clamp_count.fetch_add(1, Ordering::Relaxed);
        }
        y
    }

    /// Number of observations clamped so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    /// Ground-truth budgets `(V_T, L_T)` of the schedule.
    pub fn budgets(&self) -> (f64, usize) {
        (self.v_budget, self.l_budget)
    }

    pub fn schedule(&self) -> &[DVector<f64>] {
        &self.rewards
    }
}

/// `V_T = sum_t || r_{t+1} - r_t ||_inf` and `L_T = 1 + #{t : r_{t+1} != r_t}`.
pub fn budgets(rewards: &[DVector<f64>]) -> (f64, usize) {
    let mut v = 0.0;
    let mut l = 1usize;
    for w in rewards.windows(2) {
        let diff = (&w[1] - &w[0]).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        v += diff;
        if w[1] != w[0] {
            l += 1;
        }
    }
    (v, l)
}

/// An action set together with the environment that rewards it.
#[derive(Debug)]
pub struct BanditInstance {
    pub actions: ActionSet,
    pub env: Environment,
}

/// Piecewise-constant rewards drawn from a Gaussian process, switching at the
/// given times.
///
/// Actions are sampled uniformly from the unit sphere in `R^d`. Each segment
/// draws an independent reward vector from `N(0, K)` (via the Cholesky factor
/// of the Gram matrix) and rescales it to maximum absolute value `scale`.
/// Switch times are 1-based: a switch at time `s` means rounds `>= s` use the
/// next segment.
#[allow(clippy::too_many_arguments)]
pub fn gp_switching_env(
    d: usize,
    n: usize,
    kernel: &Kernel,
    switches: &[usize],
    scale: f64,
    noise_sd: f64,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<BanditInstance> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    let mut prev = 1usize;
    for &s in switches {
        if s <= prev || s > horizon {
            return Err(Error::InvalidInput(format!(
                "switch times must be strictly increasing within (1, T], got {s}"
            )));
        }
        prev = s;
    }
    let actions = ActionSet::sample_unit_sphere(n, d, rng);
    let k = gram(kernel, &actions)?;
    let map = cholesky_feature_map(&k, DEFAULT_JITTER)?;
    let n_segments = switches.len() + 1;
    let mut segments = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let z = DVector::from_fn(n, |_, _| rand_distr::StandardNormal.sample(rng));
        let mut r = map.features() * z;
        let max_abs = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if max_abs > 0.0 {
            r *= scale / max_abs;
        }
        segments.push(r);
    }
    let mut rewards = Vec::with_capacity(horizon);
    let mut seg = 0usize;
    for t in 1..=horizon {
        while seg < switches.len() && t >= switches[seg] {
            seg += 1;
        }
        rewards.push(segments[seg].clone());
    }
    let env = Environment::from_schedule(rewards, noise_sd, rng)?;
    Ok(BanditInstance { actions, env })
}

/// Phase schedule for the cosine environment.
#[derive(Debug, Clone)]
pub enum PhaseSchedule {
    /// `phase(t) = 0` for all rounds.
    Stationary,
    /// Piecewise-linear interpolation through `(t, phase)` knots; constant
    /// extrapolation outside the knot range.
    PiecewiseLinear(Vec<(f64, f64)>),
}

impl PhaseSchedule {
    /// The slowly varying preset: flat at 0 for the first tenth of the
    /// horizon, linear rise to pi by 3T/10, flat, linear rise to 2 pi over
    /// [4T/10, 6T/10], then flat.
    pub fn slow_drift(horizon: usize) -> Self {
        let t = horizon as f64;
        let pi = std::f64::consts::PI;
        PhaseSchedule::PiecewiseLinear(vec![
            (0.0, 0.0),
            (0.1 * t, 0.0),
            (0.3 * t, pi),
            (0.4 * t, pi),
            (0.6 * t, 2.0 * pi),
            (t, 2.0 * pi),
        ])
    }

    pub fn phase(&self, t: usize) -> f64 {
        match self {
            PhaseSchedule::Stationary => 0.0,
            PhaseSchedule::PiecewiseLinear(knots) => {
                let x = t as f64;
                if knots.is_empty() {
                    return 0.0;
                }
                if x <= knots[0].0 {
                    return knots[0].1;
                }
                for w in knots.windows(2) {
                    if x <= w[1].0 {
                        let (x0, y0) = w[0];
                        let (x1, y1) = w[1];
                        if x1 <= x0 {
                            return y1;
                        }
                        return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
                    }
                }
                knots.last().unwrap().1
            }
        }
    }
}

/// Cosine rewards `r_t(x) = scale * cos(3 <x, theta> + phase(t))` with `x`
/// and `theta` sampled uniformly from the unit sphere.
pub fn cosine_env(
    d: usize,
    n: usize,
    phase: &PhaseSchedule,
    scale: f64,
    noise_sd: f64,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<BanditInstance> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    let actions = ActionSet::sample_unit_sphere(n, d, rng);
    let theta = ActionSet::sample_unit_sphere(1, d, rng).action(0).clone();
    let projections: Vec<f64> = actions.iter().map(|a| a.dot(&theta)).collect();
    let rewards: Vec<DVector<f64>> = (1..=horizon)
        .map(|t| {
            let ph = phase.phase(t);
            DVector::from_fn(n, |i, _| scale * (3.0 * projections[i] + ph).cos())
        })
        .collect();
    let env = Environment::from_schedule(rewards, noise_sd, rng)?;
    Ok(BanditInstance { actions, env })
}

/// One row of a regret trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Round, 1-based.
    pub t: usize,
    /// Epoch index, 1-based; always 1 for non-adaptive algorithms.
    pub epoch: usize,
    /// Block index within the epoch.
    pub block: usize,
    /// Index of the strategy used this round.
    pub strategy_index: usize,
    pub action: usize,
    /// Observed (noisy) reward.
    pub reward: f64,
    pub inst_regret: f64,
    pub cum_regret: f64,
    /// Whether the change-detection test fired at the end of this round.
    pub restarted: bool,
}

/// Per-round actions, rewards and regret against the per-round best action.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegretTrace {
    pub rows: Vec<TraceRow>,
}

impl RegretTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn final_cum_regret(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Cumulative regret at round `t` (1-based); 0 before the first round.
    pub fn cum_regret_at(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.rows.get(t.min(self.rows.len()) - 1).map_or(0.0, |r| r.cum_regret)
    }

    pub fn restarts(&self) -> usize {
        self.rows.iter().filter(|r| r.restarted).count()
    }
}

/// Scores a played action sequence against the environment's noiseless
/// schedule. The reward column holds `r_t(x_t)` (no noise is drawn).
pub fn regret_of(actions: &[usize], env: &Environment) -> Result<RegretTrace> {
    if actions.len() > env.horizon() {
        return Err(Error::InvalidInput(format!(
            "action sequence of length {} exceeds horizon {}",
            actions.len(),
            env.horizon()
        )));
    }
    let mut rows = Vec::with_capacity(actions.len());
    let mut cum = 0.0;
    for (i, &a) in actions.iter().enumerate() {
        let t = i + 1;
        if a >= env.n_actions() {
            return Err(Error::InvalidInput(format!("action index {a} out of range")));
        }
        let r = env.reward(t, a);
        let inst = env.best_reward(t) - r;
        cum += inst;
        rows.push(TraceRow {
            t,
            epoch: 1,
            block: 0,
            strategy_index: 0,
            action: a,
            reward: r,
            inst_regret: inst,
            cum_regret: cum,
            restarted: false,
        });
    }
    Ok(RegretTrace { rows })
}
