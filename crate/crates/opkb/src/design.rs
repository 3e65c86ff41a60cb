//! Design matrices, information gain, optimal design and the OP solver.
//!
//! Everything here revolves around the regularized second-moment matrix of a
//! randomized strategy `P` under a feature map `phi`:
//!
//! ```text
//! S_phi(P, lambda) = sum_x P(x) phi(x) phi(x)^T + lambda I
//! ```
//!
//! Three optimization problems over the probability simplex share this
//! structure and one solver:
//!
//! * **information gain**: `gamma = max_P log det S_phi(T P / sigma, 1)`,
//! * **optimal design on `A`**: `argmax_{P on A} log det S_phi(P, sigma/T)`,
//! * **OP**: `argmin_P sum_x P(x) gap(x) - (2/beta) log det S_phi(P, sigma/T)`,
//!   whose solution is mixed with the optimal design on the empirically good
//!   arms.
//!
//! The solver is Frank-Wolfe with pairwise (vertex-exchange) steps and exact
//! golden-section line search. The gradient of the log-det term in coordinate
//! `x` is the quadratic form `||phi(x)||^2` through the inverse of `S`, so the
//! linear minimization oracle is an argmax over coordinates, and the standard
//! Frank-Wolfe gap upper-bounds the suboptimality of the returned point. That
//! gap is reported in the diagnostics and is what downstream consumers budget
//! for when they rely on optimality conditions of the exact solution.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::FeatureMap;

/// A probability distribution over the action set.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    weights: DVector<f64>,
}

impl Strategy {
    /// Validates non-negativity and normalization (within 1e-9), then stores
    /// the exactly renormalized weights.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("strategy must have at least one action".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidInput("strategy weights must be finite".into()));
        }
        if let Some(w) = weights.iter().find(|w| **w < 0.0) {
            return Err(Error::InvalidInput(format!("strategy weight {w} is negative")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("strategy weights sum to {sum}, not 1")));
        }
        let mut v = DVector::from_vec(weights);
        v /= sum;
        Ok(Self { weights: v })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1);
        Self { weights: DVector::from_element(n, 1.0 / n as f64) }
    }

    pub fn point_mass(n: usize, index: usize) -> Self {
        assert!(index < n);
        let mut w = DVector::zeros(n);
        w[index] = 1.0;
        Self { weights: w }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// `(1 - w) * self + w * other`.
    pub fn mix(&self, other: &Strategy, w: f64) -> Result<Strategy> {
        if self.len() != other.len() {
            return Err(Error::Shape("cannot mix strategies of different lengths".into()));
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidInput(format!("mixing weight {w} outside [0, 1]")));
        }
        Ok(Strategy { weights: &self.weights * (1.0 - w) + &other.weights * w })
    }

    /// Samples an action index by inverse CDF using a single uniform draw.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
            }
            cum += w;
            if u < cum {
                return i;
            }
        }
        last_positive
    }
}

/// The matrix `S_phi(P, lambda)` with its Cholesky factorization and
/// log-determinant cached.
pub struct DesignMatrix {
    s: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
    lambda: f64,
}

impl DesignMatrix {
    pub fn new(map: &FeatureMap, strategy: &Strategy, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }
        let n = map.n_actions();
        if strategy.len() != n {
            return Err(Error::Shape(format!(
                "strategy has {} weights for {n} actions",
                strategy.len()
            )));
        }
        let s = second_moment(map.features(), strategy.weights().as_slice(), None, lambda);
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Factorization("design matrix is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { s, chol, log_det, lambda })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `S^{-1} b` via the cached factorization.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `v^T S^{-1} v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.chol.solve(v))
    }

    /// The matrix `Phi S^{-1} Phi^T` whose `(x, x')` entry is
    /// `phi(x)^T S^{-1} phi(x')`. Row diagonals are the variance bounds
    /// `||phi(x)||^2_{S^{-1}}` and column `x_t` scaled by an observed reward
    /// is a full vector of propensity-weighted estimates, so this one matrix
    /// serves both the estimators and the optimality checks.
    pub fn ips_matrix(&self, map: &FeatureMap) -> DMatrix<f64> {
        let phi_t = map.features().transpose();
        let solved = self.chol.solve(&phi_t);
        let m = map.features() * solved;
        (&m + m.transpose()) * 0.5
    }
}

/// `sum_k w_k phi(idx_k) phi(idx_k)^T + lambda I` over the rows of
/// `features`; `support = None` means all rows in order.
fn second_moment(
    features: &DMatrix<f64>,
    weights: &[f64],
    support: Option<&[usize]>,
    lambda: f64,
) -> DMatrix<f64> {
    let p = features.ncols();
    let rows = support.map_or(features.nrows(), <[usize]>::len);
    debug_assert_eq!(weights.len(), rows);
    let mut scaled = DMatrix::zeros(rows, p);
    for k in 0..rows {
        let idx = support.map_or(k, |s| s[k]);
        let w = weights[k].max(0.0).sqrt();
        for c in 0..p {
            scaled[(k, c)] = features[(idx, c)] * w;
        }
    }
    let mut s = scaled.transpose() * &scaled;
    for i in 0..p {
        s[(i, i)] += lambda;
    }
    s
}

/// Options for the Frank-Wolfe solver.
#[derive(Debug, Clone)]
pub struct FwOptions {
    /// Stop when the duality gap falls below `rel_tol * max(1, |objective|)`.
    pub rel_tol: f64,
    pub max_iters: usize,
    /// Golden-section iterations per line search.
    pub ls_iters: usize,
    /// Record the objective value at every iteration.
    pub track_objective: bool,
}

impl Default for FwOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-6, max_iters: 5000, ls_iters: 30, track_objective: false }
    }
}

/// Solver certificate attached to every returned design.
#[derive(Debug, Clone)]
pub struct FwDiagnostics {
    /// Final value of the maximized objective.
    pub objective: f64,
    /// Frank-Wolfe duality gap at the returned point; the true optimum
    /// exceeds `objective` by at most this amount.
    pub duality_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Per-iteration objective values when tracking was requested.
    pub objective_trace: Vec<f64>,
}

/// Maximize `c * log det(sum_k w_k psi_k psi_k^T + lambda I) - <w, cost>`
/// over the simplex on `support`.
struct SimplexLogDet<'a> {
    features: &'a DMatrix<f64>,
    support: &'a [usize],
    lambda: f64,
    c: f64,
    cost: Option<&'a [f64]>,
}

impl SimplexLogDet<'_> {
    fn cost_at(&self, k: usize) -> f64 {
        self.cost.map_or(0.0, |c| c[self.support[k]])
    }

    fn feature_row(&self, k: usize) -> DVector<f64> {
        self.features.row(self.support[k]).transpose()
    }
}

struct FwState {
    weights: Vec<f64>,
    objective: f64,
    gap: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Golden-section maximization of a concave `g` over `[0, hi]`; also checks
/// both endpoints.
fn golden_max(g: impl Fn(f64) -> f64, hi: f64, iters: usize) -> (f64, f64) {
    let mut lo = 0.0;
    let mut up = hi;
    let mut x1 = up - GOLDEN * (up - lo);
    let mut x2 = lo + GOLDEN * (up - lo);
    let mut g1 = g(x1);
    let mut g2 = g(x2);
    for _ in 0..iters {
        if g1 >= g2 {
            up = x2;
            x2 = x1;
            g2 = g1;
            x1 = up - GOLDEN * (up - lo);
            g1 = g(x1);
        } else {
            lo = x1;
            x1 = x2;
            g1 = g2;
            x2 = lo + GOLDEN * (up - lo);
            g2 = g(x2);
        }
    }
    let mut best = (0.0, g(0.0));
    for (s, v) in [(x1, g1), (x2, g2), (hi, g(hi))] {
        if v > best.1 {
            best = (s, v);
        }
    }
    best
}

fn frank_wolfe(problem: &SimplexLogDet, opts: &FwOptions) -> Result<FwState> {
    let m = problem.support.len();
    debug_assert!(m >= 1);
    let mut w = vec![1.0 / m as f64; m];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let (objective, gap) = loop {
        // Factorize S at the current iterate and evaluate gradient/objective.
        let s = second_moment(problem.features, &w, Some(problem.support), problem.lambda);
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Factorization("iterate matrix lost positive definiteness".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        // phi^T S^{-1} phi for every support feature; the log-det gradient.
        let mut phi_t = DMatrix::zeros(problem.features.ncols(), m);
        for k in 0..m {
            phi_t.set_column(k, &problem.feature_row(k));
        }
        let solved = chol.solve(&phi_t);
        let mut grad = vec![0.0; m];
        let mut cost_dot = 0.0;
        for k in 0..m {
            let quad = phi_t.column(k).dot(&solved.column(k));
            grad[k] = problem.c * quad - problem.cost_at(k);
            cost_dot += w[k] * problem.cost_at(k);
        }
        let objective = problem.c * log_det - cost_dot;
        if opts.track_objective {
            trace.push(objective);
        }

        // Frank-Wolfe vertex and duality gap certificate.
        let v = argmax(&grad);
        let grad_dot: f64 = grad.iter().zip(&w).map(|(g, w)| g * w).sum();
        let gap = grad[v] - grad_dot;
        let tol = opts.rel_tol * objective.abs().max(1.0);
        if gap <= tol {
            converged = true;
            break (objective, gap);
        }
        if iterations >= opts.max_iters {
            break (objective, gap);
        }
        iterations += 1;

        // Pairwise (vertex exchange) step: move mass from the worst
        // supported atom to the best atom, with exact line search via the
        // rank-2 determinant identity.
        let a = argmin_supported(&grad, &w);
        let mut improved = false;
        if a != v && w[a] > 0.0 {
            let phi_v = problem.feature_row(v);
            let phi_a = problem.feature_row(a);
            let sv = chol.solve(&phi_v);
            let m_vv = phi_v.dot(&sv);
            let m_va = phi_a.dot(&sv);
            let m_aa = phi_a.dot(&chol.solve(&phi_a));
            let dcost = problem.cost_at(v) - problem.cost_at(a);
            let g = |s: f64| {
                let det2 = (1.0 + s * m_vv) * (1.0 - s * m_aa) + s * s * m_va * m_va;
                if det2 <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                problem.c * det2.ln() - s * dcost
            };
            let (step, gain) = golden_max(g, w[a], opts.ls_iters);
            if step > 0.0 && gain > 0.0 {
                w[v] += step;
                w[a] = (w[a] - step).max(0.0);
                improved = true;
            }
        }

        if !improved {
            // Plain Frank-Wolfe step toward the vertex. The segment objective
            // is evaluated through the eigenvalues of the scaled direction.
            let phi_v = problem.feature_row(v);
            let mut b = &phi_v * phi_v.transpose();
            for i in 0..b.nrows() {
                b[(i, i)] += problem.lambda;
            }
            let d = &b - &s;
            let l = chol.l();
            let y = l.solve_lower_triangular(&d).ok_or_else(|| {
                Error::Factorization("triangular solve failed in line search".into())
            })?;
            let c_mat = l
                .solve_lower_triangular(&y.transpose())
                .ok_or_else(|| Error::Factorization("triangular solve failed in line search".into()))?;
            let eigs = ((&c_mat + c_mat.transpose()) * 0.5).symmetric_eigen().eigenvalues;
            let dcost = problem.cost_at(v) - cost_dot;
            let g = |s: f64| {
                let mut acc = 0.0;
                for &e in eigs.iter() {
                    let t = 1.0 + s * e;
                    if t <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    acc += t.ln();
                }
                problem.c * acc - s * dcost
            };
            let (step, gain) = golden_max(g, 1.0, opts.ls_iters);
            if step > 0.0 && gain > 0.0 {
                for x in w.iter_mut() {
                    *x *= 1.0 - step;
                }
                w[v] += step;
            } else {
                // No ascent direction made progress; the gap is already an
                // honest certificate for the current point.
                break (objective, gap);
            }
        }

        let total: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= total;
        }
    };

    Ok(FwState { weights: w, objective, gap, iterations, converged, trace })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn argmin_supported(values: &[f64], weights: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in values.iter().enumerate() {
        if weights[i] > 0.0 && (best == usize::MAX || v < values[best]) {
            best = i;
        }
    }
    debug_assert_ne!(best, usize::MAX);
    best
}

fn expand_to_full(n: usize, support: &[usize], weights: &[f64]) -> Strategy {
    let mut full = vec![0.0; n];
    for (k, &idx) in support.iter().enumerate() {
        full[idx] = weights[k].max(0.0);
    }
    let sum: f64 = full.iter().sum();
    let mut v = DVector::from_vec(full);
    v /= sum;
    Strategy { weights: v }
}

/// Result of the information-gain computation.
#[derive(Debug, Clone)]
pub struct InfoGain {
    /// `max_P log det S_phi(T P / sigma, 1)`, certified to be within the
    /// diagnostics' duality gap of the true maximum.
    pub gamma: f64,
    /// The distribution achieving the reported value.
    pub maximizer: Strategy,
    pub diagnostics: FwDiagnostics,
}

fn diag_from(state: &FwState) -> FwDiagnostics {
    FwDiagnostics {
        objective: state.objective,
        duality_gap: state.gap,
        iterations: state.iterations,
        converged: state.converged,
        objective_trace: state.trace.clone(),
    }
}

/// Computes the continuous maximum information gain
/// `gamma_{phi,T} = max_P log det S_phi(T P / sigma, 1)`.
///
/// Non-convergence within the iteration budget is not an error; the returned
/// value is the best feasible one and the diagnostics carry the flag.
pub fn info_gain(map: &FeatureMap, horizon: f64, sigma: f64, opts: &FwOptions) -> Result<InfoGain> {
    if !(horizon >= 1.0 && horizon.is_finite()) {
        return Err(Error::InvalidInput(format!("horizon must be >= 1, got {horizon}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let n = map.n_actions();
    // S_phi(T P / sigma, 1) equals the second moment of features scaled by
    // sqrt(T / sigma) with unit regularizer.
    let scaled = map.features() * (horizon / sigma).sqrt();
    let support: Vec<usize> = (0..n).collect();
    let problem = SimplexLogDet { features: &scaled, support: &support, lambda: 1.0, c: 1.0, cost: None };
    let state = frank_wolfe(&problem, opts)?;
    Ok(InfoGain {
        gamma: state.objective,
        maximizer: expand_to_full(n, &support, &state.weights),
        diagnostics: diag_from(&state),
    })
}

/// Computes the optimal design `argmax_{P on A} log det S_phi(P, sigma / T)`.
///
/// At the exact optimum the quadratic form `||phi(x)||^2` through the inverse
/// design matrix is uniformly bounded by the information gain over `A`; the
/// duality gap in the diagnostics bounds how far the returned design can
/// violate that.
pub fn optimal_design(
    map: &FeatureMap,
    support: &[usize],
    sigma: f64,
    horizon: f64,
    opts: &FwOptions,
) -> Result<(Strategy, FwDiagnostics)> {
    let n = map.n_actions();
    validate_support(support, n)?;
    if !(sigma > 0.0 && horizon >= 1.0) {
        return Err(Error::InvalidInput("need sigma > 0 and horizon >= 1".into()));
    }
    let lambda = sigma / horizon;
    if support.len() == 1 {
        let strategy = Strategy::point_mass(n, support[0]);
        let dm = DesignMatrix::new(map, &strategy, lambda)?;
        let diag = FwDiagnostics {
            objective: dm.log_det(),
            duality_gap: 0.0,
            iterations: 0,
            converged: true,
            objective_trace: Vec::new(),
        };
        return Ok((strategy, diag));
    }
    let problem =
        SimplexLogDet { features: map.features(), support, lambda, c: 1.0, cost: None };
    let state = frank_wolfe(&problem, opts)?;
    Ok((expand_to_full(n, support, &state.weights), diag_from(&state)))
}

fn validate_support(support: &[usize], n: usize) -> Result<()> {
    if support.is_empty() {
        return Err(Error::InvalidInput("support set must be non-empty".into()));
    }
    let mut seen = vec![false; n];
    for &i in support {
        if i >= n {
            return Err(Error::InvalidInput(format!("support index {i} out of range (N = {n})")));
        }
        if seen[i] {
            return Err(Error::InvalidInput(format!("support index {i} repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Diagnostics of an OP solve: the minimized objective, the duality gaps of
/// the two inner solves and their iteration counts.
#[derive(Debug, Clone)]
pub struct OpDiagnostics {
    /// Value of `sum_x P*(x) gap(x) - (2 / beta) log det S(P*, sigma/T)`.
    pub objective: f64,
    /// Duality gap of the minimizer solve; doubles as a KKT residual.
    pub p_star_gap: f64,
    /// Duality gap of the optimal-design solve on the good-arm set.
    pub design_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Slack budgets for the optimality inequalities of an OP solution, expressed
/// as explicit functions of the solver gaps.
#[derive(Debug, Clone, Copy)]
pub struct OpSlack {
    /// Additive slack on `sum_x Q(x) gap(x) <= (1 + alpha) gamma / beta`.
    pub expected_gap: f64,
    /// Additive slack on `||phi(x)||^2 <= beta gap(x) + 2 gamma`.
    pub quad_linear: f64,
    /// Additive slack on `||phi(x)||^2 <= beta^2 gap(x)^2 / (2 alpha gamma) + 2 gamma`.
    pub quad_quadratic: f64,
}

/// Output of [`op_solve`].
#[derive(Debug, Clone)]
pub struct OpSolution {
    /// The mixed strategy `Q = (P* + pi(A)) / 2`.
    pub q: Strategy,
    /// Minimizer of the OP objective.
    pub p_star: Strategy,
    /// Optimal design on the good-arm set.
    pub design: Strategy,
    /// The good-arm set `A = { x : gap(x) <= 2 alpha gamma / beta }`.
    pub good_set: Vec<usize>,
    pub diagnostics: OpDiagnostics,
}

impl OpSolution {
    /// Slack budgets induced by the solver gaps, for a given `beta`.
    ///
    /// Derivation mirrors the optimality argument: the first inequality uses
    /// the gap once through the averaged stationarity condition (half of it
    /// survives the mixture), the second scales the stationarity violation by
    /// `beta`, and the third additionally inherits twice the design gap
    /// through the good-arm branch.
    pub fn slack(&self, beta: f64) -> OpSlack {
        let g = self.diagnostics.p_star_gap.max(0.0);
        let gd = self.diagnostics.design_gap.max(0.0);
        OpSlack {
            expected_gap: 0.5 * g,
            quad_linear: beta * g,
            quad_quadratic: (beta * g).max(2.0 * gd),
        }
    }
}

/// Solves the exploration/exploitation optimization problem.
///
/// Finds the minimizer `P*` of `sum_x P(x) gap(x) - (2/beta) log det
/// S_phi(P, sigma/T)`, forms the good-arm set
/// `A = { x : gap(x) <= 2 alpha gamma / beta }`, and returns the mixture
/// `Q = P*/2 + pi_phi(A)/2`.
///
/// `gamma` is the information gain of `map` at `(horizon, sigma)`, computed
/// once by the caller and reused across solves.
#[allow(clippy::too_many_arguments)]
pub fn op_solve(
    map: &FeatureMap,
    gaps: &[f64],
    alpha: f64,
    beta: f64,
    horizon: f64,
    sigma: f64,
    gamma: f64,
    opts: &FwOptions,
) -> Result<OpSolution> {
    let n = map.n_actions();
    if gaps.len() != n {
        return Err(Error::Shape(format!("{} gaps for {n} actions", gaps.len())));
    }
    if gaps.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::InvalidInput("gap estimates must be finite and non-negative".into()));
    }
    let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_gap > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "minimum gap must be zero at the empirical best arm, got {min_gap}"
        )));
    }
    if !(alpha > 0.0 && beta > 0.0 && sigma > 0.0 && horizon >= 1.0) {
        return Err(Error::InvalidInput("need alpha > 0, beta > 0, sigma > 0, horizon >= 1".into()));
    }

    let lambda = sigma / horizon;
    let support: Vec<usize> = (0..n).collect();
    let problem = SimplexLogDet {
        features: map.features(),
        support: &support,
        lambda,
        c: 2.0 / beta,
        cost: Some(gaps),
    };
    let state = frank_wolfe(&problem, opts)?;
    let p_star = expand_to_full(n, &support, &state.weights);

    let threshold = 2.0 * alpha * gamma / beta;
    let good_set: Vec<usize> = (0..n).filter(|&x| gaps[x] <= threshold).collect();
    debug_assert!(!good_set.is_empty());
    let (design, design_diag) = optimal_design(map, &good_set, sigma, horizon, opts)?;
    let q = p_star.mix(&design, 0.5)?;

    Ok(OpSolution {
        q,
        p_star,
        design,
        good_set,
        diagnostics: OpDiagnostics {
            objective: -state.objective,
            p_star_gap: state.gap,
            design_gap: design_diag.duality_gap,
            iterations: state.iterations + design_diag.iterations,
            converged: state.converged && design_diag.converged,
        },
    })
}
