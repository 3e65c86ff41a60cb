//! Kernel bandits driven by optimization-based randomized strategies, with
//! change detection for non-stationary environments.
//!
//! The crate provides:
//!
//! * [`kernels`] — kernels, Gram matrices and `N`-dimensional feature maps;
//! * [`design`] — design matrices, maximum information gain, optimal design
//!   and the OP solver (Frank-Wolfe over the simplex);
//! * [`estimation`] — inverse-propensity reward estimates and empirical
//!   suboptimality gaps over time intervals;
//! * [`adaopkb`] — the OPKB block loop, the replay scheduler, the restart
//!   test and the adaptive ADA-OPKB epoch loop;
//! * [`neural`] — a fully connected ReLU network, gradient feature maps and
//!   the OPNN / ADA-OPNN variants driven by them;
//! * [`baselines`] — GP-UCB and its sliding-window variant;
//! * [`envs`] — simulated non-stationary environments and regret accounting;
//! * [`harness`] — experiment configuration, seeded parallel execution and
//!   CSV reporting.

pub mod adaopkb;
pub mod baselines;
pub mod design;
pub mod envs;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod kernels;
pub mod neural;
pub mod rng;

pub use adaopkb::{
    ada_opkb_run, opkb_run, restart_test, schedule, AlgoParams, EpochLog, ReplayInterval,
    RunOutput,
};
pub use baselines::{gpucb_run, gpucb_step, GpPosterior, Gpucb, GpucbConfig};
pub use design::{
    info_gain, op_solve, optimal_design, DesignMatrix, FwOptions, InfoGain, OpSolution, Strategy,
};
pub use envs::{
    cosine_env, gp_switching_env, regret_of, BanditInstance, Environment, PhaseSchedule,
    RegretTrace,
};
pub use error::{Error, Result};
pub use estimation::{
    gap_estimates, interval_estimates, ips_estimate_round, GapEstimates, IpsScorer,
    RewardEstimates, RoundRecord,
};
pub use harness::{grid_search, run_experiment, ExperimentConfig, ExperimentOutput};
pub use kernels::{
    cholesky_feature_map, eigen_feature_map, equivalence_check, gram, ActionSet, FeatureMap,
    Kernel, MaternNu,
};
pub use neural::{
    ada_opnn_run, gradient_feature_map, nn_forward, nn_gradient, opnn_run, train_nn, Mlp,
    MlpConfig, NeuralConfig, NeuralFeatureProvider, TrainOptions,
};
