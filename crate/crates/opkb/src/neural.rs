//! Fully connected ReLU network, gradient feature maps, and the OPNN /
//! ADA-OPNN variants that adapt the feature map to observed data.
//!
//! The network is `f(x; W) = sqrt(m) W_L^T relu(W_{L-1} relu(... W_1 x))`
//! with width `m`, depth `L`, entries initialized i.i.d. from `N(0, 2/m)`.
//! Its parameter gradient scaled by `1/sqrt(m)` serves as a feature map:
//! the Gram matrix `G[i][j] = <g(a_i; W), g(a_j; W)> / m` is factorized into
//! an `N`-dimensional map exactly like a kernel Gram matrix.
//!
//! OPNN is the OPKB block loop where, before each block `j >= 1`, the
//! network is retrained from its initial weights on the epoch history and
//! the feature map is rebuilt from the new gradients. The block constants
//! (`beta_j`, `E`, `alpha`) stay tied to the information gain of the
//! *initial* map. ADA-OPNN additionally runs the change-detection machinery,
//! with the restart test evaluated under the current block's map.
//!
//! Backpropagation is implemented directly over dense matrices; the
//! architecture is fixed and small at simulation scale, so an autodiff
//! dependency would buy nothing.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::adaopkb::{run_with_provider, AlgoParams, FeatureProvider, RunOutput};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::estimation::RoundRecord;
use crate::kernels::{cholesky_feature_map, ActionSet, FeatureMap, FeatureSource};
use crate::rng::RunRng;

/// Memory budget for materializing all gradient vectors at once when
/// building a gradient Gram matrix; above it, gradients are streamed
/// pairwise.
pub const DEFAULT_GRAM_MEMORY_BUDGET: usize = 1 << 30;

/// Architecture of the network.
#[derive(Debug, Clone, Copy)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
}

impl MlpConfig {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 {
            return Err(Error::InvalidInput("width and input dimension must be >= 1".into()));
        }
        if self.depth < 2 {
            return Err(Error::InvalidInput("depth must be >= 2".into()));
        }
        Ok(())
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        let (d, m, l) = (self.input_dim, self.width, self.depth);
        m * d + m * m * (l - 2) + m
    }
}

/// The network: current weights plus the initial snapshot they are anchored
/// to. Layer shapes: `W_1: m x d`, `W_2..W_{L-1}: m x m`, `W_L: m x 1`.
#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpConfig,
    weights: Vec<DMatrix<f64>>,
    initial: Arc<Vec<DMatrix<f64>>>,
}

/// Per-layer gradient blocks, in layer order.
pub type LayerGrads = Vec<DMatrix<f64>>;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Subgradient at zero is taken as zero.
fn relu_prime(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl Mlp {
    /// Initializes all entries i.i.d. from `N(0, 2 / m)`.
    pub fn init(config: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, (2.0 / config.width as f64).sqrt()).unwrap();
        let mut weights = Vec::with_capacity(config.depth);
        for layer in 0..config.depth {
            let (rows, cols) = Self::layer_shape(&config, layer);
            weights.push(DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng)));
        }
        Ok(Self { config, initial: Arc::new(weights.clone()), weights })
    }

    /// Builds a network from explicit weights (the snapshot is the same).
    pub fn from_weights(config: MlpConfig, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        config.validate()?;
        if weights.len() != config.depth {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                config.depth,
                weights.len()
            )));
        }
        for (layer, w) in weights.iter().enumerate() {
            let expected = Self::layer_shape(&config, layer);
            if (w.nrows(), w.ncols()) != expected {
                return Err(Error::Shape(format!(
                    "layer {layer} has shape {}x{}, expected {}x{}",
                    w.nrows(),
                    w.ncols(),
                    expected.0,
                    expected.1
                )));
            }
        }
        Ok(Self { config, initial: Arc::new(weights.clone()), weights })
    }

    fn layer_shape(config: &MlpConfig, layer: usize) -> (usize, usize) {
        let (d, m, l) = (config.input_dim, config.width, config.depth);
        if layer == 0 {
            (m, d)
        } else if layer == l - 1 {
            (m, 1)
        } else {
            (m, m)
        }
    }

    pub fn config(&self) -> MlpConfig {
        self.config
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn initial_weights(&self) -> &[DMatrix<f64>] {
        &self.initial
    }

    /// A copy reset to the initial snapshot.
    pub fn at_initial(&self) -> Self {
        Self {
            config: self.config,
            weights: self.initial.as_ref().clone(),
            initial: Arc::clone(&self.initial),
        }
    }

    /// Hidden pre-activations and activations for one input.
    fn forward_trace(&self, x: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let l = self.config.depth;
        let mut pre = Vec::with_capacity(l - 1);
        let mut act = Vec::with_capacity(l - 1);
        let mut a = x.clone();
        for layer in 0..l - 1 {
            let h = &self.weights[layer] * &a;
            a = h.map(relu);
            pre.push(h);
            act.push(a.clone());
        }
        (pre, act)
    }
}

/// Forward pass `f(x; W) = sqrt(m) W_L^T relu(... relu(W_1 x))`.
pub fn nn_forward(net: &Mlp, x: &DVector<f64>) -> f64 {
    let (_, act) = net.forward_trace(x);
    let last = act.last().unwrap();
    (net.config.width as f64).sqrt() * net.weights.last().unwrap().column(0).dot(last)
}

/// Parameter gradient of the forward pass by backpropagation, as per-layer
/// blocks in layer order.
pub fn nn_gradient(net: &Mlp, x: &DVector<f64>) -> LayerGrads {
    let l = net.config.depth;
    let sqrt_m = (net.config.width as f64).sqrt();
    let (pre, act) = net.forward_trace(x);
    let mut grads = vec![DMatrix::zeros(0, 0); l];

    // Output layer: d f / d W_L = sqrt(m) * a_{L-1}.
    grads[l - 1] = DMatrix::from_column_slice(net.config.width, 1, act[l - 2].as_slice()) * sqrt_m;

    // delta at the last hidden layer.
    let mut delta: DVector<f64> = net.weights[l - 1].column(0) * sqrt_m;
    delta.zip_apply(&pre[l - 2], |d, h| *d *= relu_prime(h));

    for layer in (0..l - 1).rev() {
        let input = if layer == 0 { x } else { &act[layer - 1] };
        grads[layer] = &delta * input.transpose();
        if layer > 0 {
            let mut next = net.weights[layer].transpose() * &delta;
            next.zip_apply(&pre[layer - 1], |d, h| *d *= relu_prime(h));
            delta = next;
        }
    }
    grads
}

/// Layer-wise inner product of two gradients.
pub fn grad_dot(a: &LayerGrads, b: &LayerGrads) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Options for [`train_nn`].
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Regularization weight `lambda` anchoring the weights to the initial
    /// snapshot (scaled by the width in the loss).
    pub reg: f64,
    /// Gradient-descent step size `eta`.
    pub step_size: f64,
    /// Number of full-batch gradient steps `J`.
    pub steps: usize,
}

/// Result of a training run: the trained network and per-step loss values
/// (`steps + 1` entries, the last one evaluated at the returned weights).
pub struct TrainResult {
    pub net: Mlp,
    pub losses: Vec<f64>,
}

/// Trains from the initial snapshot with `J` full-batch gradient-descent
/// steps on the squared-error loss
/// `sum_t (f(x_t; W) - y_t)^2 / 2 + m reg ||W - W0||^2 / 2`.
pub fn train_nn(net: &Mlp, data: &[(DVector<f64>, f64)], opts: &TrainOptions) -> Result<TrainResult> {
    if !(opts.reg > 0.0 && opts.step_size > 0.0) {
        return Err(Error::InvalidInput("need reg > 0 and step_size > 0".into()));
    }
    let mut current = net.at_initial();
    let mut losses = Vec::with_capacity(opts.steps + 1);
    if data.is_empty() {
        // Pure regularizer: the gradient vanishes at the snapshot.
        losses.extend(std::iter::repeat_n(0.0, opts.steps + 1));
        return Ok(TrainResult { net: current, losses });
    }

    let cfg = net.config;
    let batch = data.len();
    let mut x = DMatrix::zeros(cfg.input_dim, batch);
    let mut y = DVector::zeros(batch);
    for (i, (xi, yi)) in data.iter().enumerate() {
        if xi.len() != cfg.input_dim {
            return Err(Error::Shape(format!(
                "input {i} has dimension {}, expected {}",
                xi.len(),
                cfg.input_dim
            )));
        }
        x.set_column(i, xi);
        y[i] = *yi;
    }
    let sqrt_m = (cfg.width as f64).sqrt();
    let m_reg = cfg.width as f64 * opts.reg;

    for step in 0..=opts.steps {
        // Batch forward.
        let l = cfg.depth;
        let mut pre = Vec::with_capacity(l - 1);
        let mut act = Vec::with_capacity(l - 1);
        let mut a = x.clone();
        for layer in 0..l - 1 {
            let h = &current.weights[layer] * &a;
            a = h.map(relu);
            pre.push(h);
            act.push(a.clone());
        }
        let out = (current.weights[l - 1].transpose() * &act[l - 2]) * sqrt_m; // 1 x B
        let resid = out.row(0).transpose() - &y;

        let mut loss = 0.5 * resid.norm_squared();
        for (w, w0) in current.weights.iter().zip(current.initial.iter()) {
            loss += 0.5 * m_reg * (w - w0).norm_squared();
        }
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        if step == opts.steps {
            break;
        }

        // Batch backward.
        let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(l);
        for (w, w0) in current.weights.iter().zip(current.initial.iter()) {
            grads.push((w - w0) * m_reg);
        }
        grads[l - 1] += &act[l - 2] * resid.clone() * sqrt_m;
        let mut delta = &current.weights[l - 1] * resid.transpose() * sqrt_m; // m x B
        delta.zip_apply(&pre[l - 2], |d, h| *d *= relu_prime(h));
        for layer in (0..l - 1).rev() {
            let input = if layer == 0 { &x } else { &act[layer - 1] };
            grads[layer] += &delta * input.transpose();
            if layer > 0 {
                let mut next = current.weights[layer].transpose() * &delta;
                next.zip_apply(&pre[layer - 1], |d, h| *d *= relu_prime(h));
                delta = next;
            }
        }

        for (w, g) in current.weights.iter_mut().zip(&grads) {
            *w -= g * opts.step_size;
        }
    }

    Ok(TrainResult { net: current, losses })
}

/// Builds the feature map equivalent to the scaled gradient map
/// `g(.; W) / sqrt(m)`: forms `G[i][j] = <g(a_i), g(a_j)> / m` and
/// factorizes it like a kernel Gram matrix.
pub fn gradient_feature_map(net: &Mlp, actions: &ActionSet, jitter: f64) -> Result<FeatureMap> {
    gradient_feature_map_with_budget(net, actions, jitter, DEFAULT_GRAM_MEMORY_BUDGET)
}

/// As [`gradient_feature_map`], with an explicit memory budget in bytes.
/// When all `N` gradients fit in the budget they are held at once;
/// otherwise they are streamed pairwise at the cost of recomputation.
pub fn gradient_feature_map_with_budget(
    net: &Mlp,
    actions: &ActionSet,
    jitter: f64,
    budget_bytes: usize,
) -> Result<FeatureMap> {
    let n = actions.len();
    if actions.dim() != net.config.input_dim {
        return Err(Error::Shape(format!(
            "actions have dimension {} but the network expects {}",
            actions.dim(),
            net.config.input_dim
        )));
    }
    let m = net.config.width as f64;
    let bytes_all = n * net.config.n_params() * std::mem::size_of::<f64>();
    let mut gram = DMatrix::zeros(n, n);
    if bytes_all <= budget_bytes {
        let grads: Vec<LayerGrads> = (0..n).map(|i| nn_gradient(net, actions.action(i))).collect();
        for i in 0..n {
            for j in 0..=i {
                let v = grad_dot(&grads[i], &grads[j]) / m;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
    } else {
        for i in 0..n {
            let gi = nn_gradient(net, actions.action(i));
            gram[(i, i)] = grad_dot(&gi, &gi) / m;
            for j in 0..i {
                let gj = nn_gradient(net, actions.action(j));
                let v = grad_dot(&gi, &gj) / m;
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
    }
    let map = cholesky_feature_map(&gram, jitter)?;
    Ok(FeatureMap::from_rows(map.features().clone(), FeatureSource::NeuralGradient, map.jitter()))
}

/// Configuration of the neural feature provider.
#[derive(Debug, Clone, Copy)]
pub struct NeuralConfig {
    pub width: usize,
    pub depth: usize,
    /// Gradient steps per retraining (`J`); zero disables adaptation and
    /// reproduces the initial-map behavior exactly.
    pub train_steps: usize,
    /// Training step size `eta`.
    pub step_size: f64,
    /// Training regularization `lambda`.
    pub train_reg: f64,
    /// Jitter for Gram factorizations.
    pub jitter: f64,
    /// Training targets are divided by this scale before the regression.
    /// It is the operator-supplied bound under which the reward sequence is
    /// assumed well-behaved for the network; it cannot be verified online.
    pub target_scale: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            width: 256,
            depth: 3,
            train_steps: 100,
            step_size: 1e-7,
            train_reg: 1.0,
            jitter: crate::kernels::DEFAULT_JITTER,
            target_scale: 1.0,
        }
    }
}

/// Feature provider that retrains the network from its initial weights on
/// the epoch history before every block.
pub struct NeuralFeatureProvider {
    actions: ActionSet,
    net: Mlp,
    config: NeuralConfig,
    initial_map: Option<Arc<FeatureMap>>,
}

impl NeuralFeatureProvider {
    /// Draws initial weights from the given stream.
    pub fn new(actions: ActionSet, config: NeuralConfig, net_rng: &mut RunRng) -> Result<Self> {
        if !(config.target_scale > 0.0) {
            return Err(Error::InvalidInput("target_scale must be positive".into()));
        }
        let net = Mlp::init(
            MlpConfig { input_dim: actions.dim(), width: config.width, depth: config.depth },
            net_rng,
        )?;
        Ok(Self { actions, net, config, initial_map: None })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    /// The feature map of the initial weights; used to derive the
    /// information gain that fixes the block constants.
    pub fn initial_feature_map(&mut self) -> Result<Arc<FeatureMap>> {
        if self.initial_map.is_none() {
            let map = gradient_feature_map(&self.net, &self.actions, self.config.jitter)?;
            self.initial_map = Some(Arc::new(map));
        }
        Ok(Arc::clone(self.initial_map.as_ref().unwrap()))
    }
}

impl FeatureProvider for NeuralFeatureProvider {
    fn initial_map(&mut self) -> Result<Arc<FeatureMap>> {
        self.initial_feature_map()
    }

    fn block_map(&mut self, _j: usize, records: &[RoundRecord]) -> Result<Arc<FeatureMap>> {
        let data: Vec<(DVector<f64>, f64)> = records
            .iter()
            .map(|r| (self.actions.action(r.action).clone(), r.reward / self.config.target_scale))
            .collect();
        let opts = TrainOptions {
            reg: self.config.train_reg,
            step_size: self.config.step_size,
            steps: self.config.train_steps,
        };
        let trained = train_nn(&self.net, &data, &opts)?;
        let map = gradient_feature_map(&trained.net, &self.actions, self.config.jitter)?;
        Ok(Arc::new(map))
    }

    fn is_constant(&self) -> bool {
        self.config.train_steps == 0
    }
}

/// Runs OPNN: the OPKB block loop with retrained gradient feature maps.
pub fn opnn_run(
    env: &Environment,
    provider: &mut NeuralFeatureProvider,
    params: &AlgoParams,
    rng: &mut RunRng,
) -> Result<RunOutput> {
    run_with_provider(env, provider, params, rng, None)
}

/// Runs ADA-OPNN: OPNN with replay scheduling and change detection.
pub fn ada_opnn_run(
    env: &Environment,
    provider: &mut NeuralFeatureProvider,
    params: &AlgoParams,
    rng: &mut RunRng,
    scheduler_rng: &mut RunRng,
) -> Result<RunOutput> {
    run_with_provider(env, provider, params, rng, Some(scheduler_rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{info_gain, FwOptions};
    use crate::envs::{cosine_env, PhaseSchedule};
    use crate::rng;

    fn small_net(seed: u64, d: usize, m: usize, l: usize) -> Mlp {
        let mut r = rng::stream(seed, "network");
        Mlp::init(MlpConfig { input_dim: d, width: m, depth: l }, &mut r).unwrap()
    }

    /// Straightforward loop-based forward pass, kept independent of the
    /// library implementation.
    fn forward_oracle(net: &Mlp, x: &DVector<f64>) -> f64 {
        let mut a: Vec<f64> = x.iter().copied().collect();
        for layer in 0..net.config().depth - 1 {
            let w = &net.weights()[layer];
            let mut next = vec![0.0; w.nrows()];
            for (r, slot) in next.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..w.ncols() {
                    s += w[(r, c)] * a[c];
                }
                *slot = s.max(0.0);
            }
            a = next;
        }
        let w_last = net.weights().last().unwrap();
        let mut s = 0.0;
        for r in 0..w_last.nrows() {
            s += w_last[(r, 0)] * a[r];
        }
        (net.config().width as f64).sqrt() * s
    }

    #[test]
    fn forward_zero_weights_is_zero() {
        let cfg = MlpConfig { input_dim: 3, width: 4, depth: 3 };
        let weights = vec![
            DMatrix::zeros(4, 3),
            DMatrix::zeros(4, 4),
            DMatrix::zeros(4, 1),
        ];
        let net = Mlp::from_weights(cfg, weights).unwrap();
        assert_eq!(nn_forward(&net, &DVector::from_vec(vec![0.5, -0.3, 1.0])), 0.0);
    }

    #[test]
    fn forward_hand_example() {
        // Depth 2, width 1: f = sqrt(1) * w2 * relu(w1 . x).
        let cfg = MlpConfig { input_dim: 2, width: 1, depth: 2 };
        let weights = vec![
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
        ];
        let net = Mlp::from_weights(cfg, weights).unwrap();
        let out = nn_forward(&net, &DVector::from_vec(vec![0.5, 2.0]));
        assert!((out - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let mut r = rng::stream(2, "neural-test");
        for seed in 0..10 {
            let net = small_net(seed, 3, 6, 3);
            let x = DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0f64));
            let a = nn_forward(&net, &x);
            let b = forward_oracle(&net, &x);
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..20 {
            let net = small_net(100 + seed, 3, 8, 3);
            let mut r = rng::stream(200 + seed, "neural-test");
            let x = {
                let v = DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0f64));
                v.normalize()
            };
            let (pre, _) = net.forward_trace(&x);
            let near_kink = pre.iter().any(|layer| layer.iter().any(|v| v.abs() <= 1e-6));
            if near_kink {
                continue;
            }
            let analytic = nn_gradient(&net, &x);
            for layer in 0..net.config().depth {
                let (rows, cols) = (net.weights()[layer].nrows(), net.weights()[layer].ncols());
                for rr in 0..rows {
                    for cc in 0..cols {
                        let mut plus = net.clone();
                        plus.weights_mut()[layer][(rr, cc)] += h;
                        let mut minus = net.clone();
                        minus.weights_mut()[layer][(rr, cc)] -= h;
                        // Skip coordinates whose perturbation crosses a kink.
                        let crossed = [&plus, &minus].iter().any(|n| {
                            let (p, _) = n.forward_trace(&x);
                            p.iter().any(|l| l.iter().any(|v| v.abs() <= 1e-6))
                        });
                        if crossed {
                            continue;
                        }
                        let fd = (nn_forward(&plus, &x) - nn_forward(&minus, &x)) / (2.0 * h);
                        let g = analytic[layer][(rr, cc)];
                        assert!(
                            (g - fd).abs() <= 1e-5 * (1.0 + g.abs()),
                            "seed {seed} layer {layer} ({rr},{cc}): analytic {g} vs fd {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_of_first_layer_vanishes_at_zero_input() {
        let net = small_net(5, 4, 6, 3);
        let g = nn_gradient(&net, &DVector::zeros(4));
        assert_eq!(g[0].norm(), 0.0);
    }

    #[test]
    fn doubling_output_layer_doubles_forward_not_its_gradient() {
        let net = small_net(6, 3, 5, 3);
        let x = DVector::from_vec(vec![0.2, -0.5, 0.8]);
        let f1 = nn_forward(&net, &x);
        let g1 = nn_gradient(&net, &x);
        let mut doubled = net.clone();
        let last = doubled.config().depth - 1;
        doubled.weights_mut()[last] *= 2.0;
        let f2 = nn_forward(&doubled, &x);
        let g2 = nn_gradient(&doubled, &x);
        assert!((f2 - 2.0 * f1).abs() < 1e-12 * (1.0 + f1.abs()));
        assert!((g2[last].clone() - g1[last].clone()).norm() < 1e-12);
    }

    #[test]
    fn train_zero_steps_returns_snapshot() {
        let net = small_net(7, 2, 4, 3);
        let data = vec![(DVector::from_vec(vec![0.1, 0.2]), 0.3)];
        let opts = TrainOptions { reg: 1.0, step_size: 1e-3, steps: 0 };
        let out = train_nn(&net, &data, &opts).unwrap();
        for (w, w0) in out.net.weights().iter().zip(net.initial_weights()) {
            assert_eq!(w, w0);
        }
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn train_empty_history_stays_at_snapshot() {
        let net = small_net(8, 2, 4, 3);
        let opts = TrainOptions { reg: 10.0, step_size: 1e-3, steps: 5 };
        let out = train_nn(&net, &[], &opts).unwrap();
        for (w, w0) in out.net.weights().iter().zip(net.initial_weights()) {
            assert_eq!(w, w0);
        }
    }

    #[test]
    fn training_loss_decreases_at_small_step_size() {
        let net = small_net(9, 2, 6, 3);
        let data = vec![(DVector::from_vec(vec![0.6, -0.8]), 0.4)];
        let opts = TrainOptions { reg: 1.0, step_size: 1e-4, steps: 10 };
        let out = train_nn(&net, &data, &opts).unwrap();
        assert_eq!(out.losses.len(), 11);
        for w in out.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn larger_regularization_shrinks_toward_snapshot() {
        for seed in 0..10 {
            let net = small_net(300 + seed, 3, 8, 3);
            let mut r = rng::stream(400 + seed, "neural-test");
            let data: Vec<(DVector<f64>, f64)> = (0..6)
                .map(|_| {
                    let x: DVector<f64> = DVector::from_fn(3, |_, _| r.random_range(-1.0..1.0));
                    (x.normalize(), r.random_range(-0.8..0.8))
                })
                .collect();
            let dist = |reg: f64| {
                let opts = TrainOptions { reg, step_size: 1e-5, steps: 50 };
                let out = train_nn(&net, &data, &opts).unwrap();
                out.net
                    .weights()
                    .iter()
                    .zip(net.initial_weights())
                    .map(|(w, w0)| (w - w0).norm_squared())
                    .sum::<f64>()
                    .sqrt()
            };
            let large = dist(1e3);
            let small = dist(1e2);
            assert!(
                large <= small + 1e-12,
                "seed {seed}: ||W - W0|| = {large} at reg 1e3 vs {small} at reg 1e2"
            );
        }
    }

    #[test]
    fn gradient_gram_is_symmetric_and_reproduced() {
        let mut r = rng::stream(10, "neural-test");
        let actions = ActionSet::sample_unit_sphere(6, 3, &mut r);
        let net = small_net(11, 3, 16, 3);
        let map = gradient_feature_map(&net, &actions, 1e-10).unwrap();
        assert_eq!(map.source(), FeatureSource::NeuralGradient);
        // Reconstruct the Gram directly and compare.
        let grads: Vec<LayerGrads> = (0..6).map(|i| nn_gradient(&net, actions.action(i))).collect();
        let m = 16.0;
        for i in 0..6 {
            for j in 0..6 {
                let direct = grad_dot(&grads[i], &grads[j]) / m;
                let from_map = map.feature(i).dot(&map.feature(j));
                assert!(
                    (direct - from_map).abs() < 1e-8,
                    "({i},{j}): {direct} vs {from_map}"
                );
            }
        }
    }

    #[test]
    fn streaming_gram_matches_stored_gram() {
        let mut r = rng::stream(12, "neural-test");
        let actions = ActionSet::sample_unit_sphere(5, 3, &mut r);
        let net = small_net(13, 3, 12, 3);
        let stored = gradient_feature_map_with_budget(&net, &actions, 1e-10, usize::MAX).unwrap();
        let streamed = gradient_feature_map_with_budget(&net, &actions, 1e-10, 0).unwrap();
        assert_eq!(stored.features(), streamed.features());
    }

    #[test]
    fn gradient_gram_concentrates_with_width() {
        // max_ij |G(m) - G(4m)| is non-increasing in m, averaged over seeds.
        let mut r = rng::stream(14, "neural-test");
        let actions = ActionSet::sample_unit_sphere(4, 3, &mut r);
        let widths = [64usize, 256, 1024];
        let seeds = 10;
        let mut devs = vec![0.0; widths.len()];
        for s in 0..seeds {
            for (wi, &m) in widths.iter().enumerate() {
                let gram_at = |width: usize, seed: u64| {
                    let net = small_net(seed, 3, width, 3);
                    let map = gradient_feature_map(&net, &actions, 1e-10).unwrap();
                    map.gram()
                };
                let g1 = gram_at(m, 1000 + s);
                let g2 = gram_at(4 * m, 1000 + s);
                let dev = (&g1 - &g2).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                devs[wi] += dev / seeds as f64;
            }
        }
        for w in devs.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "deviation grew with width: {devs:?}");
        }
    }

    #[test]
    fn opnn_without_training_matches_opkb_on_initial_map() {
        // J = 0: the retrained network equals the snapshot every block, so
        // the run must be bit-identical to OPKB on the initial gradient map.
        let mut er = rng::stream(20, "environment");
        let inst = cosine_env(3, 8, &PhaseSchedule::Stationary, 0.8, 0.1, 400, &mut er).unwrap();
        let mut nr = rng::stream(20, "network");
        let config = NeuralConfig { width: 32, train_steps: 0, ..NeuralConfig::default() };
        let mut provider = NeuralFeatureProvider::new(inst.actions.clone(), config, &mut nr).unwrap();
        let map = provider.initial_feature_map().unwrap();
        let gamma = info_gain(&map, 400.0, 1.0, &FwOptions::default()).unwrap().gamma;
        let params =
            AlgoParams::tuned(1.0, 0.05, 400, 8, gamma, [0.5, 0.5, 1.0, 0.05, 0.25]).unwrap();

        let mut lr1 = rng::stream(20, "learner");
        let a = opnn_run(&inst.env, &mut provider, &params, &mut lr1).unwrap();
        let mut lr2 = rng::stream(20, "learner");
        let b = crate::adaopkb::opkb_run(&inst.env, &map, &params, &mut lr2).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn paired_estimates_recompute_bit_identically() {
        // Interval estimates across blocks use the per-round feature map and
        // strategy; recomputing them from the stored records must reproduce
        // the live snapshots exactly.
        let mut er = rng::stream(21, "environment");
        let inst = cosine_env(3, 6, &PhaseSchedule::Stationary, 0.8, 0.1, 300, &mut er).unwrap();
        let mut nr = rng::stream(21, "network");
        let config = NeuralConfig {
            width: 16,
            train_steps: 5,
            step_size: 1e-4,
            ..NeuralConfig::default()
        };
        let mut provider = NeuralFeatureProvider::new(inst.actions.clone(), config, &mut nr).unwrap();
        let map0 = provider.initial_feature_map().unwrap();
        let gamma = info_gain(&map0, 300.0, 1.0, &FwOptions::default()).unwrap().gamma;
        let params =
            AlgoParams::tuned(1.0, 0.05, 300, 6, gamma, [0.5, 0.5, 1.0, 0.05, 0.25]).unwrap();
        let mut lr = rng::stream(21, "learner");
        let out = opnn_run(&inst.env, &mut provider, &params, &mut lr).unwrap();
        assert!(out.blocks.len() >= 2, "expected several blocks");

        // Rebuild per-block scorers from the recorded maps/strategies.
        let scorers: Vec<crate::estimation::IpsScorer> = out
            .blocks
            .iter()
            .map(|b| {
                crate::estimation::IpsScorer::new(&b.map, &b.strategy, params.sigma, 300.0).unwrap()
            })
            .collect();
        for diag in &out.blocks {
            let mut sum = DVector::zeros(6);
            for row in &out.trace.rows[..diag.end] {
                sum += scorers[row.strategy_index].round_estimates(row.action, row.reward);
            }
            let mean = sum / diag.end as f64;
            for (a, b) in mean.iter().zip(&diag.reward_estimates) {
                assert_eq!(a, b, "recomputed estimate differs from live snapshot");
            }
        }
    }
}
