// Calibration sweeps to pick default tuned constants at simulation scale.
// Run with: cargo run --release -p opkb --example calibrate -- <stage>
// Stages: detect, window, headtohead, opnn

use nalgebra::DVector;
use opkb::adaopkb::{ada_opkb_run, AlgoParams};
use opkb::baselines::{gpucb_run, GpucbConfig};
use opkb::design::{info_gain, FwOptions};
use opkb::envs::{cosine_env, gp_switching_env, BanditInstance, Environment, PhaseSchedule};
use opkb::kernels::{cholesky_feature_map, gram, ActionSet, FeatureMap, Kernel, DEFAULT_JITTER};
use opkb::neural::{opnn_run, NeuralConfig, NeuralFeatureProvider};
use opkb::rng;
use rayon::prelude::*;

fn stationary(seed: u64, n: usize, d: usize, t: usize) -> (BanditInstance, FeatureMap) {
    let mut er = rng::stream(seed, "environment");
    let kernel = Kernel::rbf(0.2);
    let inst = gp_switching_env(d, n, &kernel, &[], 0.8, 0.1, t, &mut er).unwrap();
    let k = gram(&kernel, &inst.actions).unwrap();
    let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
    (inst, map)
}

// GP draw flipped at t_switch: r2 = -r1. Returns None when the flip gap
// falls below 1.
fn flip_instance(seed: u64, n: usize, d: usize, t: usize) -> Option<(BanditInstance, FeatureMap, f64)> {
    let mut er = rng::stream(seed, "environment");
    let kernel = Kernel::rbf(0.2);
    let actions = ActionSet::sample_unit_sphere(n, d, &mut er);
    let k = gram(&kernel, &actions).unwrap();
    let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
    let z = DVector::from_fn(n, |_, _| {
        use rand_distr::Distribution;
        rand_distr::StandardNormal.sample(&mut er)
    });
    let mut r1 = map.features() * z;
    let max_abs = r1.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    r1 *= 0.8 / max_abs;
    let gap = r1.max() - r1.min();
    if gap < 1.0 {
        return None;
    }
    let schedule: Vec<DVector<f64>> =
        (0..t).map(|i| if i < t / 2 { r1.clone() } else { -&r1 }).collect();
    let env = Environment::from_schedule(schedule, 0.1, &mut er).unwrap();
    Some((BanditInstance { actions, env }, map, gap))
}

fn detect_stage() {
    let n = 20;
    let d = 5;
    let t = 4000;
    let n_seeds = 40u64;
    for &sigma in &[1.0f64] {
        for &c0 in &[0.9, 1.0, 1.1, 1.2, 1.4] {
            for &c3 in &[0.04, 0.05, 0.06] {
                let c = [c0, 0.5, 1.0, c3, 0.25];
                // Stationary false alarms.
                let stats: Vec<(usize, usize, usize)> = (0..n_seeds)
                    .into_par_iter()
                    .map(|seed| {
                        let (inst, map) = stationary(seed, n, d, t);
                        let gamma =
                            info_gain(&map, t as f64, sigma, &FwOptions::default()).unwrap().gamma;
                        let params =
                            AlgoParams::tuned(sigma, 0.05, t, n, gamma, c).unwrap();
                        let mut lr = rng::stream(seed, "learner");
                        let mut sr = rng::stream(seed, "scheduler");
                        let out = ada_opkb_run(&inst.env, &map, &params, &mut lr, &mut sr).unwrap();
                        (out.epochs.n_restarts(), params.block_base(), 0)
                    })
                    .collect();
                let false_alarm_runs = stats.iter().filter(|(r, _, _)| *r > 0).count();
                let e_base = stats[0].1;

                // Flip detection.
                let mut results = Vec::new();
                let mut seed = 10_000u64;
                while results.len() < n_seeds as usize {
                    if let Some((inst, map, _gap)) = flip_instance(seed, n, d, t) {
                        results.push((seed, inst, map));
                    }
                    seed += 1;
                }
                let flip: Vec<(bool, bool)> = results
                    .into_par_iter()
                    .map(|(seed, inst, map)| {
                        let gamma =
                            info_gain(&map, t as f64, sigma, &FwOptions::default()).unwrap().gamma;
                        let params = AlgoParams::tuned(sigma, 0.05, t, n, gamma, c).unwrap();
                        let mut lr = rng::stream(seed, "learner");
                        let mut sr = rng::stream(seed, "scheduler");
                        let out = ada_opkb_run(&inst.env, &map, &params, &mut lr, &mut sr).unwrap();
                        // Rounds 1..=t/2 see the first segment; a restart
                        // strictly after the switch ends at t/2 + 1 or later.
                        let before = out
                            .epochs
                            .epochs
                            .iter()
                            .any(|e| e.restart.is_some() && e.end <= t / 2);
                        let after = out
                            .epochs
                            .epochs
                            .iter()
                            .any(|e| e.restart.is_some() && e.end > t / 2);
                        (before, after)
                    })
                    .collect();
                let false_before = flip.iter().filter(|(b, _)| *b).count();
                let detected = flip.iter().filter(|(_, a)| *a).count();
                println!(
                    "sigma={sigma} c0={c0} c3={c3} (E={e_base}): stationary false-alarm runs {false_alarm_runs}/40, flip detected {detected}/40, false-before {false_before}/40"
                );
            }
        }
    }
}

fn window_stage() {
    // Tune SW-GPUCB (lambda, v, window) on the desk-scale single-switch env.
    let n = 30;
    let d = 5;
    let t = 5000;
    let seeds: Vec<u64> = (1000..1010).collect();
    let mut rows = Vec::new();
    for &lambda in &[0.05, 0.1, 0.2, 0.5, 1.0] {
        for &v in &[0.05, 0.1, 0.2, 0.5, 1.0] {
            for &w in &[500usize, 1000, 2000, 3000, 5000] {
                let finals: Vec<f64> = seeds
                    .par_iter()
                    .map(|&seed| {
                        let mut er = rng::stream(seed, "environment");
                        let kernel = Kernel::rbf(0.2);
                        let inst =
                            gp_switching_env(d, n, &kernel, &[3 * t / 10], 0.8, 0.1, t, &mut er)
                                .unwrap();
                        let k = gram(&kernel, &inst.actions).unwrap();
                        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
                        let config = GpucbConfig {
                            lambda,
                            ucb_scale: v,
                            window: Some(w),
                            ..GpucbConfig::default()
                        };
                        gpucb_run(&inst.env, &map, &config, t).unwrap().final_cum_regret()
                    })
                    .collect();
                let mean = finals.iter().sum::<f64>() / finals.len() as f64;
                rows.push((mean, lambda, v, w));
            }
        }
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (mean, lambda, v, w) in rows.iter().take(12) {
        println!("regret {mean:8.1}  lambda={lambda} v={v} window={w}");
    }
}

fn head_to_head_stage() {
    // Env2 at desk scale: ADA-OPKB (tuned defaults) vs SW-GPUCB tuned on env1.
    let n = 30;
    let d = 5;
    let t = 5000;
    let seeds: Vec<u64> = (0..20).collect();
    let args: Vec<String> = std::env::args().collect();
    let c0: f64 = args.get(2).map_or(0.5, |s| s.parse().unwrap());
    let c3: f64 = args.get(3).map_or(0.03, |s| s.parse().unwrap());
    let sw_lambda: f64 = args.get(4).map_or(0.2, |s| s.parse().unwrap());
    let sw_v: f64 = args.get(5).map_or(0.1, |s| s.parse().unwrap());
    let sw_w: usize = args.get(6).map_or(2000, |s| s.parse().unwrap());
    let results: Vec<(f64, f64, usize)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut er = rng::stream(seed, "environment");
            let kernel = Kernel::rbf(0.2);
            let inst =
                gp_switching_env(d, n, &kernel, &[3 * t / 20, t / 2], 0.8, 0.1, t, &mut er).unwrap();
            let k = gram(&kernel, &inst.actions).unwrap();
            let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
            let gamma = info_gain(&map, t as f64, 1.0, &FwOptions::default()).unwrap().gamma;
            let params =
                AlgoParams::tuned(1.0, 0.05, t, n, gamma, [c0, 0.5, 1.0, c3, 0.25]).unwrap();
            let mut lr = rng::stream(seed, "learner");
            let mut sr = rng::stream(seed, "scheduler");
            let ada = ada_opkb_run(&inst.env, &map, &params, &mut lr, &mut sr).unwrap();
            let sw = gpucb_run(
                &inst.env,
                &map,
                &GpucbConfig {
                    lambda: sw_lambda,
                    ucb_scale: sw_v,
                    window: Some(sw_w),
                    ..GpucbConfig::default()
                },
                t,
            )
            .unwrap();
            (ada.trace.final_cum_regret(), sw.final_cum_regret(), ada.epochs.n_restarts())
        })
        .collect();
    let ada_mean = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    let sw_mean = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let restarts: f64 = results.iter().map(|r| r.2 as f64).sum::<f64>() / results.len() as f64;
    println!("ada-opkb mean regret {ada_mean:.1} (avg restarts {restarts:.1}) vs sw-gpucb {sw_mean:.1}");
}

fn opnn_stage() {
    let n = 30;
    let d = 5;
    let t = 3000;
    let seeds: Vec<u64> = (0..10).collect();
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(2).map_or(100, |s| s.parse().unwrap());
    let eta: f64 = args.get(3).map_or(1e-6, |s| s.parse().unwrap());
    let reg: f64 = args.get(4).map_or(1.0, |s| s.parse().unwrap());
    let c0: f64 = args.get(5).map_or(0.5, |s| s.parse().unwrap());
    let c3: f64 = args.get(6).map_or(0.03, |s| s.parse().unwrap());
    let results: Vec<(f64, f64)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut er = rng::stream(seed, "environment");
            let inst = cosine_env(d, n, &PhaseSchedule::Stationary, 0.8, 0.1, t, &mut er).unwrap();
            let run = |train_steps: usize| {
                let config = NeuralConfig {
                    width: 256,
                    depth: 3,
                    train_steps,
                    step_size: eta,
                    train_reg: reg,
                    ..NeuralConfig::default()
                };
                let mut nr = rng::stream(seed, "network");
                let mut provider =
                    NeuralFeatureProvider::new(inst.actions.clone(), config, &mut nr).unwrap();
                let map0 = provider.initial_feature_map().unwrap();
                let gamma = info_gain(&map0, t as f64, 1.0, &FwOptions::default()).unwrap().gamma;
                let params =
                    AlgoParams::tuned(1.0, 0.05, t, n, gamma, [c0, 0.5, 1.0, c3, 0.25]).unwrap();
                let mut lr = rng::stream(seed, "learner");
                opnn_run(&inst.env, &mut provider, &params, &mut lr).unwrap().trace.final_cum_regret()
            };
            (run(steps), run(0))
        })
        .collect();
    let opnn = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    let opnn0 = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    let wins = results.iter().filter(|(a, b)| a < b).count();
    println!("J={steps} eta={eta} reg={reg}: opnn {opnn:.1} vs opnn0 {opnn0:.1} (opnn wins {wins}/{})", results.len());
}

fn joint_stage() {
    // Sweep (c0, c2, c3) jointly against the three acceptance setups:
    // no-false-alarm and detection at N=20/T=4000, and env2 regret at
    // N=30/T=5000 against the tuned SW-GPUCB preset.
    let seeds: Vec<u64> = (0..20).collect();
    for &c2 in &[2.0, 5.0, 10.0, 20.0] {
        for &c0 in &[0.6, 0.9, 1.2] {
            for &c3 in &[0.03, 0.05] {
                let c = [c0, 0.5, c2, c3, 0.25];

                // Criterion-7 setup.
                let false_alarms: usize = seeds
                    .par_iter()
                    .map(|&seed| {
                        let (inst, map) = stationary(seed, 20, 5, 4000);
                        let gamma =
                            info_gain(&map, 4000.0, 1.0, &FwOptions::default()).unwrap().gamma;
                        let params = AlgoParams::tuned(1.0, 0.05, 4000, 20, gamma, c).unwrap();
                        let mut lr = rng::stream(seed, "learner");
                        let mut sr = rng::stream(seed, "scheduler");
                        let out = ada_opkb_run(&inst.env, &map, &params, &mut lr, &mut sr).unwrap();
                        usize::from(out.epochs.n_restarts() > 0)
                    })
                    .sum();

                // Criterion-8 setup.
                let mut flips = Vec::new();
                let mut s = 10_000u64;
                while flips.len() < seeds.len() {
                    if let Some(x) = flip_instance(s, 20, 5, 4000) {
                        flips.push((s, x));
                    }
                    s += 1;
                }
                let (detected, false_before) = flips
                    .par_iter()
                    .map(|(seed, (inst, map, _))| {
                        let gamma =
                            info_gain(map, 4000.0, 1.0, &FwOptions::default()).unwrap().gamma;
                        let params = AlgoParams::tuned(1.0, 0.05, 4000, 20, gamma, c).unwrap();
                        let mut lr = rng::stream(*seed, "learner");
                        let mut sr = rng::stream(*seed, "scheduler");
                        let out = ada_opkb_run(&inst.env, map, &params, &mut lr, &mut sr).unwrap();
                        let before =
                            out.epochs.epochs.iter().any(|e| e.restart.is_some() && e.end <= 2000);
                        let after =
                            out.epochs.epochs.iter().any(|e| e.restart.is_some() && e.end > 2000);
                        (usize::from(after), usize::from(before))
                    })
                    .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

                // Criterion-9 setup.
                let (ada_total, sw_total, restarts) = seeds
                    .par_iter()
                    .map(|&seed| {
                        let mut er = rng::stream(seed, "environment");
                        let kernel = Kernel::rbf(0.2);
                        let inst = gp_switching_env(5, 30, &kernel, &[750, 2500], 0.8, 0.1, 5000, &mut er)
                            .unwrap();
                        let k = gram(&kernel, &inst.actions).unwrap();
                        let map = cholesky_feature_map(&k, DEFAULT_JITTER).unwrap();
                        let gamma =
                            info_gain(&map, 5000.0, 1.0, &FwOptions::default()).unwrap().gamma;
                        let params = AlgoParams::tuned(1.0, 0.05, 5000, 30, gamma, c).unwrap();
                        let mut lr = rng::stream(seed, "learner");
                        let mut sr = rng::stream(seed, "scheduler");
                        let ada = ada_opkb_run(&inst.env, &map, &params, &mut lr, &mut sr).unwrap();
                        let sw = gpucb_run(
                            &inst.env,
                            &map,
                            &GpucbConfig {
                                lambda: 0.2,
                                ucb_scale: 0.1,
                                window: Some(3000),
                                ..GpucbConfig::default()
                            },
                            5000,
                        )
                        .unwrap();
                        (ada.trace.final_cum_regret(), sw.final_cum_regret(), ada.epochs.n_restarts())
                    })
                    .reduce(|| (0.0, 0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));

                println!(
                    "c0={c0} c2={c2} c3={c3}: stat-FA {false_alarms}/20, detect {detected}/20, FA-before {false_before}/20, env2 ada {:.0} (restarts {:.1}) vs sw {:.0}",
                    ada_total / 20.0,
                    restarts as f64 / 20.0,
                    sw_total / 20.0
                );
            }
        }
    }
}

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "detect".into());
    match stage.as_str() {
        "detect" => detect_stage(),
        "window" => window_stage(),
        "headtohead" => head_to_head_stage(),
        "joint" => joint_stage(),
        "opnn" => opnn_stage(),
        other => eprintln!("unknown stage {other}"),
    }
}
