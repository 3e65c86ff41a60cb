// Scratch diagnostics for calibrating the change-detection test.
use nalgebra::DVector;
use opkb::adaopkb::{ada_opkb_run, AlgoParams};
use opkb::design::{info_gain, FwOptions};
use opkb::envs::Environment;
use opkb::kernels::{cholesky_feature_map, gram, ActionSet, Kernel, DEFAULT_JITTER};
use opkb::rng;

fn main() { replay_schedules();
    let n = 4;
    let horizon = 800;
    for seed in 0..1u64 {
        let mut er = rng::stream(15, "environment");
        let actions = ActionSet::sample_unit_sphere(n, 2, &mut er);
        let k = gram(&Kernel::rbf(0.2), &actions).unwrap();
        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
        let base = DVector::from_vec(vec![0.8, -0.8, 0.4, -0.4]);
        let schedule: Vec<DVector<f64>> = (0..horizon)
            .map(|t| if t < horizon / 2 { base.clone() } else { -&base })
            .collect();
        let env = Environment::from_schedule(schedule, 0.05, &mut er).unwrap();
        let gamma = info_gain(&map, horizon as f64, 1.0, &FwOptions::default()).unwrap().gamma;
        let params = AlgoParams::tuned(1.0, 0.05, horizon, n, gamma, [0.5, 0.5, 1.0, 0.2, 0.25]).unwrap();
        println!(
            "seed {seed}: gamma = {gamma:.2}, E = {}, alpha = {:.4}, thr(0) = {:.3}, thr(1) = {:.3}, thr(2) = {:.3}",
            params.block_base(),
            params.alpha(),
            4.0 * params.constant(0) * params.mu(0),
            4.0 * params.constant(0) * params.mu(1),
            4.0 * params.constant(0) * params.mu(2),
        );
        let mut lr = rng::stream(15, "learner");
        let mut sr = rng::stream(15, "scheduler");
        let out = ada_opkb_run(&env, &map, &params, &mut lr, &mut sr).unwrap();
        println!(
            "  restarts = {}, final regret = {:.1}",
            out.epochs.n_restarts(),
            out.trace.final_cum_regret()
        );
        for b in &out.blocks {
            println!(
                "  epoch {} block {} [{}, {}] gaps = {:?}",
                b.epoch,
                b.block,
                b.start,
                b.end,
                b.gaps.iter().map(|g| (g * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
        for e in &out.epochs.epochs {
            println!("  epoch {} [{}, {}] restart: {:?}", e.index, e.start, e.end, e.restart);
        }
    }
}

#[allow(dead_code)]
fn replay_schedules() {
    let mut sr = opkb::rng::stream(15, "scheduler");
    let e = 66;
    let starts = [1usize, 67, 199, 463];
    for (j, &s) in starts.iter().enumerate() {
        let sch = opkb::adaopkb::schedule(s, j, e, &mut sr);
        println!("block {j} schedule: {sch:?}");
    }
}
