//! Inverse-propensity reward estimates and empirical suboptimality gaps.
//!
//! After playing `x_t ~ P_t` and observing reward `y_t`, the per-round
//! estimate of every action's expected reward is
//!
//! ```text
//! est_t(x) = phi(x)^T S_phi(P_t, sigma/T)^{-1} phi(x_t) y_t
//! ```
//!
//! which is unbiased up to a regularization term of order `sqrt(sigma/T)`.
//! Interval estimates are arithmetic means of round estimates, and empirical
//! gaps subtract each action's interval estimate from the best one.
//!
//! Estimates are recomputed from stored round records rather than streamed:
//! the adaptive algorithms query many overlapping intervals (replay windows,
//! cumulative blocks), and with the per-strategy factorization cached each
//! query costs `O(|interval| * N)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DVector;

use crate::design::{DesignMatrix, Strategy};
use crate::error::{Error, Result};
use crate::kernels::FeatureMap;

/// One played round, as stored for estimate recomputation.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    /// Time index (1-based).
    pub t: usize,
    /// Index of the played action.
    pub action: usize,
    /// Observed reward, clamped into `[-1, 1]`.
    pub reward: f64,
    /// Index of the strategy in force at this round; keys the factorization
    /// cache.
    pub strategy_index: usize,
    /// The strategy itself.
    pub strategy: Arc<Strategy>,
}

impl RoundRecord {
    /// Builds a record, clamping the reward into `[-1, 1]`. The boolean
    /// reports whether clamping changed the value.
    pub fn new(
        t: usize,
        action: usize,
        reward: f64,
        strategy_index: usize,
        strategy: Arc<Strategy>,
    ) -> (Self, bool) {
        let clamped = reward.clamp(-1.0, 1.0);
        (
            Self { t, action, reward: clamped, strategy_index, strategy },
            clamped != reward,
        )
    }
}

/// Reward estimates averaged over a time interval `[start, end]`.
#[derive(Debug, Clone)]
pub struct RewardEstimates {
    pub start: usize,
    pub end: usize,
    pub values: Vec<f64>,
}

/// Empirical suboptimality gaps over a time interval.
#[derive(Debug, Clone)]
pub struct GapEstimates {
    pub start: usize,
    pub end: usize,
    pub gaps: Vec<f64>,
}

/// Per-strategy cache of the propensity matrix `Phi S^{-1} Phi^T`.
///
/// Column `x_t` of the matrix, scaled by the observed reward, is the full
/// vector of per-action round estimates; diagonal entry `x` is the variance
/// bound `||phi(x)||^2_{S^{-1}}`.
pub struct IpsScorer {
    m: nalgebra::DMatrix<f64>,
}

impl IpsScorer {
    pub fn new(map: &FeatureMap, strategy: &Strategy, sigma: f64, horizon: f64) -> Result<Self> {
        if !(sigma > 0.0 && horizon >= 1.0) {
            return Err(Error::InvalidInput("need sigma > 0 and horizon >= 1".into()));
        }
        let dm = DesignMatrix::new(map, strategy, sigma / horizon)?;
        Ok(Self { m: dm.ips_matrix(map) })
    }

    /// Round estimates for all actions given the played action and reward.
    pub fn round_estimates(&self, action: usize, reward: f64) -> DVector<f64> {
        DVector::from(self.m.column(action) * reward)
    }

    /// `||phi(x)||^2` through the inverse design matrix.
    pub fn variance_bound(&self, x: usize) -> f64 {
        self.m[(x, x)]
    }
}

/// Per-round estimate vector; one linear solve against the factorization of
/// `S_phi(P_t, sigma/T)`.
pub fn ips_estimate_round(
    map: &FeatureMap,
    strategy: &Strategy,
    action: usize,
    reward: f64,
    sigma: f64,
    horizon: f64,
) -> Result<DVector<f64>> {
    if action >= map.n_actions() {
        return Err(Error::InvalidInput(format!("action index {action} out of range")));
    }
    if !reward.is_finite() {
        return Err(Error::InvalidInput("reward must be finite".into()));
    }
    let scorer = IpsScorer::new(map, strategy, sigma, horizon)?;
    Ok(scorer.round_estimates(action, reward))
}

/// Mean of the per-round estimates over a non-empty slice of records.
///
/// Records sharing a `strategy_index` reuse one cached factorization.
pub fn interval_estimates(
    records: &[RoundRecord],
    map: &FeatureMap,
    sigma: f64,
    horizon: f64,
) -> Result<RewardEstimates> {
    if records.is_empty() {
        return Err(Error::InvalidInput("interval must be non-empty".into()));
    }
    let n = map.n_actions();
    let mut cache: HashMap<usize, IpsScorer> = HashMap::new();
    let mut sum = DVector::zeros(n);
    for rec in records {
        if rec.action >= n {
            return Err(Error::InvalidInput(format!("action index {} out of range", rec.action)));
        }
        let scorer = match cache.entry(rec.strategy_index) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(IpsScorer::new(map, &rec.strategy, sigma, horizon)?)
            }
        };
        sum += scorer.round_estimates(rec.action, rec.reward);
    }
    sum /= records.len() as f64;
    Ok(RewardEstimates {
        start: records.first().unwrap().t,
        end: records.last().unwrap().t,
        values: sum.iter().copied().collect(),
    })
}

/// Gaps `max_x' est(x') - est(x)`; the argmax set maps to exact zeros.
pub fn gap_estimates(estimates: &RewardEstimates) -> GapEstimates {
    let max = estimates.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    GapEstimates {
        start: estimates.start,
        end: estimates.end,
        gaps: estimates.values.iter().map(|v| max - v).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{info_gain, optimal_design, FwOptions};
    use crate::kernels::{cholesky_feature_map, gram, ActionSet, Kernel, DEFAULT_JITTER};
    use crate::rng;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn scalar_map() -> FeatureMap {
        cholesky_feature_map(&DMatrix::from_element(1, 1, 1.0), 1e-12).unwrap()
    }

    #[test]
    fn scalar_round_estimate() {
        // N = 1, phi = (1), point mass, sigma/T = 0.1: estimate y / 1.1.
        let map = scalar_map();
        let p = Strategy::point_mass(1, 0);
        let est = ips_estimate_round(&map, &p, 0, 0.5, 0.1, 1.0).unwrap();
        assert!((est[0] - 0.5 / 1.1).abs() < 1e-9, "estimate {}", est[0]);
    }

    #[test]
    fn zero_reward_gives_zero_vector() {
        let mut r = rng::stream(5, "estimation-test");
        let actions = ActionSet::sample_unit_sphere(6, 3, &mut r);
        let k = gram(&Kernel::rbf(0.5), &actions).unwrap();
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let est = ips_estimate_round(&map, &Strategy::uniform(6), 2, 0.0, 1.0, 100.0).unwrap();
        assert!(est.iter().all(|v| *v == 0.0));
    }

    fn record(t: usize, action: usize, reward: f64, idx: usize, p: &Arc<Strategy>) -> RoundRecord {
        RoundRecord::new(t, action, reward, idx, Arc::clone(p)).0
    }

    #[test]
    fn single_round_interval_equals_round_estimate() {
        let mut r = rng::stream(6, "estimation-test");
        let actions = ActionSet::sample_unit_sphere(5, 2, &mut r);
        let k = gram(&Kernel::rbf(0.5), &actions).unwrap();
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let p = Arc::new(Strategy::uniform(5));
        let recs = vec![record(1, 3, 0.7, 0, &p)];
        let est = interval_estimates(&recs, &map, 1.0, 50.0).unwrap();
        let direct = ips_estimate_round(&map, &p, 3, 0.7, 1.0, 50.0).unwrap();
        for x in 0..5 {
            assert!((est.values[x] - direct[x]).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_rounds_average_to_themselves() {
        let map = scalar_map();
        let p = Arc::new(Strategy::point_mass(1, 0));
        let recs = vec![record(1, 0, 0.4, 0, &p), record(2, 0, 0.4, 0, &p)];
        let est = interval_estimates(&recs, &map, 0.1, 1.0).unwrap();
        let single = ips_estimate_round(&map, &p, 0, 0.4, 0.1, 1.0).unwrap();
        assert!((est.values[0] - single[0]).abs() < 1e-14);
    }

    #[test]
    fn interval_matches_naive_recomputation() {
        let mut r = rng::stream(7, "estimation-test");
        let actions = ActionSet::sample_unit_sphere(6, 3, &mut r);
        let k = gram(&Kernel::rbf(0.4), &actions).unwrap();
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let p0 = Arc::new(Strategy::uniform(6));
        let p1 = Arc::new(Strategy::new(vec![0.4, 0.2, 0.1, 0.1, 0.1, 0.1]).unwrap());
        let recs: Vec<RoundRecord> = (0..10)
            .map(|t| {
                let (idx, p) = if t % 2 == 0 { (0, &p0) } else { (1, &p1) };
                record(t + 1, r.random_range(0..6), r.random_range(-1.0..1.0), idx, p)
            })
            .collect();
        let est = interval_estimates(&recs, &map, 1.0, 100.0).unwrap();
        let mut naive = DVector::zeros(6);
        for rec in &recs {
            naive += ips_estimate_round(&map, &rec.strategy, rec.action, rec.reward, 1.0, 100.0)
                .unwrap();
        }
        naive /= recs.len() as f64;
        for x in 0..6 {
            assert!((est.values[x] - naive[x]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_interval_is_an_error() {
        let map = scalar_map();
        assert!(interval_estimates(&[], &map, 1.0, 10.0).is_err());
    }

    #[test]
    fn gaps_basic_cases() {
        let est = RewardEstimates { start: 1, end: 2, values: vec![0.3, 0.1] };
        let gaps = gap_estimates(&est);
        assert_eq!(gaps.gaps[0], 0.0);
        assert!((gaps.gaps[1] - 0.2).abs() < 1e-15);

        let flat = RewardEstimates { start: 1, end: 2, values: vec![0.5, 0.5, 0.5] };
        assert!(gap_estimates(&flat).gaps.iter().all(|g| *g == 0.0));

        let tie = RewardEstimates { start: 1, end: 2, values: vec![0.7, 0.2, 0.7] };
        let gaps = gap_estimates(&tie);
        assert_eq!(gaps.gaps.iter().filter(|g| **g == 0.0).count(), 2);
        assert!(gaps.gaps.iter().all(|g| *g >= 0.0));
    }

    #[test]
    fn rewards_are_clamped_with_flag() {
        let p = Arc::new(Strategy::point_mass(1, 0));
        let (rec, clamped) = RoundRecord::new(1, 0, 1.3, 0, Arc::clone(&p));
        assert!(clamped);
        assert_eq!(rec.reward, 1.0);
        let (_, clamped) = RoundRecord::new(1, 0, -0.2, 0, p);
        assert!(!clamped);
    }

    #[test]
    fn round_estimate_magnitude_bound_under_mixing() {
        // When P_t mixes mu * pi(X) into any strategy, every round estimate
        // is bounded by gamma / mu (up to solver slack on gamma).
        let mut r = rng::stream(8, "estimation-test");
        for trial in 0..10 {
            let n = r.random_range(3..=10usize);
            let actions = ActionSet::sample_unit_sphere(n, 3, &mut r);
            let k = gram(&Kernel::rbf(0.4), &actions).unwrap();
            let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
            let sigma = 1.0;
            let t = 200.0;
            let opts = FwOptions::default();
            let ig = info_gain(&map, t, sigma, &opts).unwrap();
            let (pi, pi_diag) = optimal_design(&map, &(0..n).collect::<Vec<_>>(), sigma, t, &opts).unwrap();
            let mu = r.random_range(0.05..0.5);
            let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let q = Strategy::new(raw.into_iter().map(|v| v / sum).collect()).unwrap();
            let p = q.mix(&pi, mu).unwrap();
            let scorer = IpsScorer::new(&map, &p, sigma, t).unwrap();
            let bound = (ig.gamma + ig.diagnostics.duality_gap + pi_diag.duality_gap) / mu;
            for _ in 0..50 {
                let xt = p.sample(&mut r);
                let y = r.random_range(-1.0..1.0);
                let est = scorer.round_estimates(xt, y);
                let max = est.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(max <= bound * (1.0 + 1e-9), "trial {trial}: {max} > {bound}");
            }
        }
    }

    #[test]
    fn monte_carlo_moments_match_bounds() {
        // Fixed (P, phi, r): the empirical mean of the round estimates is
        // within the regularization bias bound of r(x), and the empirical
        // variance is within the quadratic-form bound.
        let mut r = rng::stream(9, "estimation-test");
        let n = 5;
        let actions = ActionSet::sample_unit_sphere(n, 3, &mut r);
        let k = gram(&Kernel::rbf(0.6), &actions).unwrap();
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let sigma = 1.0;
        let t = 100.0;
        // Reward in the span of the features with coefficient norm <= 1,
        // scaled to keep |y| <= 1 with room for noise.
        let theta = {
            let raw = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0f64));
            raw.normalize() * 0.5
        };
        let rewards: DVector<f64> = map.features() * &theta;
        let noise_bound = 1.0 - rewards.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let p = Strategy::new(vec![0.3, 0.25, 0.2, 0.15, 0.1]).unwrap();
        let scorer = IpsScorer::new(&map, &p, sigma, t).unwrap();
        let dm = DesignMatrix::new(&map, &p, sigma / t).unwrap();

        let draws = 100_000;
        let query = 2usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut sum_q4 = 0.0;
        for _ in 0..draws {
            let xt = p.sample(&mut r);
            let y = rewards[xt] + r.random_range(-noise_bound..noise_bound);
            let est = scorer.round_estimates(xt, y)[query];
            sum += est;
            sum_sq += est * est;
            sum_q4 += est.powi(4);
        }
        let nf = draws as f64;
        let mean = sum / nf;
        let var = (sum_sq - nf * mean * mean) / (nf - 1.0);
        let mc_se = (var / nf).sqrt();
        let phi_q = map.feature(query);
        let bias_bound = (sigma / t).sqrt() * dm.quad_form(&phi_q).sqrt();
        assert!(
            (mean - rewards[query]).abs() <= bias_bound + 3.0 * mc_se,
            "bias {} exceeds {bias_bound} + 3 * {mc_se}",
            (mean - rewards[query]).abs()
        );
        let m4 = sum_q4 / nf;
        let var_se = ((m4 - var * var).max(0.0) / nf).sqrt();
        assert!(
            var <= dm.quad_form(&phi_q) + 3.0 * var_se,
            "variance {var} exceeds bound {}",
            dm.quad_form(&phi_q)
        );
    }
}
