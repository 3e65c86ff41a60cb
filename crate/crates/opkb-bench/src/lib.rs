//! Shared fixtures for the benchmark targets.

use opkb::kernels::{cholesky_feature_map, gram, ActionSet, FeatureMap, Kernel, DEFAULT_JITTER};
use opkb::rng;

/// A reproducible RBF feature map over `n` unit-sphere actions in `R^d`.
pub fn rbf_map(n: usize, d: usize, seed: u64) -> (ActionSet, FeatureMap) {
    let mut r = rng::stream(seed, "bench");
    let actions = ActionSet::sample_unit_sphere(n, d, &mut r);
    let k = gram(&Kernel::rbf(0.2), &actions).expect("gram");
    let map = cholesky_feature_map(&k, DEFAULT_JITTER).expect("cholesky");
    (actions, map)
}
