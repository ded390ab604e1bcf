//! Acceptance gate: ten checks, each printing one PASS/FAIL line (visible
//! with `--nocapture`). Every check is verified against an independent
//! oracle — central finite differences, exhaustive enumeration, exact
//! categorical KL, hand-computed fixtures, or double execution — never
//! against the code under test.

use std::sync::OnceLock;

use mdrl_core::analysis::{collect_token_stats, correlate, TokenStat};
use mdrl_core::checkpoint;
use mdrl_core::diffusion::{decode, DecodeConfig, DenoiseTrajectory, UnmaskStrategy};
use mdrl_core::loss::{
    aggregate_sample_level, aggregate_token_level, evaluate_step, k3, kept_log_probs,
    loss_rldf, loss_sequential_oracle, plan_x0_steps, plan_xprev_steps, sample_timesteps,
    step_softmax, BaselineTarget, EstimatorKind, PlannedStep, PolicyMode, StepLoss,
    StepWeightTable,
};
use mdrl_core::model::{Denoiser, MlmOutcome, Model, ModelConfig, ParamStore, SamplingConfig};
use mdrl_core::optim::Optimizer;
use mdrl_core::rng::{normal, Seeder, Stream};
use mdrl_core::tasks::{TaskFamily, TaskShape};
use mdrl_core::trainer::{
    batch_tasks, eval_reward, pretrain, train_step, PretrainConfig, StepMetrics, TrainConfig,
    TrainState,
};
use rand::Rng;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    println!("criterion {n:02} [{name}]: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n:02} [{name}] failed: {detail}");
}

fn tiny_model(seed: u64) -> Model<f64> {
    Model::init(ModelConfig {
        vocab_size: mdrl_core::vocab::SIZE,
        embed_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 32,
        max_len: 24,
        seed,
    })
    .unwrap()
}

/// Add seeded Gaussian noise to every parameter (a drifted copy).
fn jitter(base: &Model<f64>, scale: f64, seeder: &Seeder, label: &str) -> Model<f64> {
    let mut m = base.clone();
    let mut rng = seeder.stream(label);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            *v += scale * normal(&mut rng);
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Shared learned fixtures. Pretraining and the seed-1 RL run are reused by
// several checks; OnceLock makes them compute exactly once per process.
// ---------------------------------------------------------------------------

const ADD_SHAPE: TaskShape = TaskShape { response_len: 4, word_len: 2 };
const SORT_SHAPE: TaskShape = TaskShape { response_len: 8, word_len: 4 };

fn add_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: mdrl_core::vocab::SIZE,
        embed_dim: 64,
        n_layers: 2,
        n_heads: 4,
        ff_dim: 128,
        max_len: 24,
        seed,
    }
}

fn train_decode() -> DecodeConfig {
    DecodeConfig {
        strategy: UnmaskStrategy::DynamicThreshold,
        k_per_step: 1,
        threshold: 0.9,
        block_size: 32,
        max_steps: 8,
    }
}

fn rl_config() -> TrainConfig {
    TrainConfig {
        rollout_batch: 16,
        decode: train_decode(),
        ..TrainConfig::default()
    }
}

fn pretrain_fixture(families: Vec<TaskFamily>, shape: TaskShape, steps: usize, seed: u64) -> Model<f64> {
    let mut model = Model::init(add_model_config(seed)).unwrap();
    let cfg = PretrainConfig { steps, batch_size: 16, lr: 1e-3, families, shape };
    pretrain(&mut model, &cfg, &Seeder::new(seed)).unwrap();
    model
}

fn add_base() -> &'static Model<f64> {
    static M: OnceLock<Model<f64>> = OnceLock::new();
    M.get_or_init(|| pretrain_fixture(vec![TaskFamily::Addition], ADD_SHAPE, 10_000, 1))
}

fn sort_base() -> &'static Model<f64> {
    static M: OnceLock<Model<f64>> = OnceLock::new();
    M.get_or_init(|| pretrain_fixture(vec![TaskFamily::Sort], SORT_SHAPE, 3_000, 5))
}

fn run_rl(
    start: Model<f64>,
    families: &[TaskFamily],
    shape: &TaskShape,
    cfg: &TrainConfig,
    master_seed: u64,
) -> (Model<f64>, Vec<StepMetrics>) {
    let seeder = Seeder::new(master_seed);
    let mut state = TrainState::new(start, Optimizer::adam(cfg.lr));
    let mut metrics = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let tasks =
            batch_tasks(families, shape, cfg.rollout_batch, &seeder, &format!("rl/tasks/step{step}"));
        metrics.push(train_step(&mut state, &tasks, cfg, &seeder).unwrap());
    }
    (state.model, metrics)
}

/// Seed-1 RL product on addition; reused for the ablation and diagnostic checks.
fn add_trained() -> &'static (Model<f64>, Vec<StepMetrics>) {
    static M: OnceLock<(Model<f64>, Vec<StepMetrics>)> = OnceLock::new();
    M.get_or_init(|| {
        run_rl(add_base().clone(), &[TaskFamily::Addition], &ADD_SHAPE, &rl_config(), 1)
    })
}

fn held_out_reward(model: &Model<f64>, family: TaskFamily, shape: &TaskShape, seed: u64) -> f64 {
    let seeder = Seeder::new(seed);
    let tasks = batch_tasks(&[family], shape, 128, &seeder, "acc/eval/tasks");
    eval_reward(model, &tasks, &train_decode(), &seeder, "acc/eval").unwrap()
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients vs central finite differences.
// ---------------------------------------------------------------------------

type LossEval<'a> = dyn FnMut(&Model<f64>, bool) -> (f64, Option<ParamStore<f64>>) + 'a;

/// Check ≥ `want` random coordinates with |∂| above 1e-3 (relative error is
/// ill-conditioned where both sides vanish; central differences with h=1e-4
/// carry ~1e-9 absolute noise).
fn fd_max_rel_err(
    base: &Model<f64>,
    eval: &mut LossEval,
    want: usize,
    rng: &mut Stream,
) -> (usize, f64) {
    const H: f64 = 1e-4;
    let (_, grads) = eval(base, true);
    let grads = grads.expect("gradient requested");
    let names: Vec<String> = base.params.names().cloned().collect();
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut attempts = 0usize;
    while checked < want && attempts < want * 200 {
        attempts += 1;
        let name = &names[rng.random_range(0..names.len() as u64) as usize];
        let len = base.params.get(name).data().len();
        let idx = rng.random_range(0..len as u64) as usize;
        let g = grads.get(name).data()[idx];
        let mut plus = base.clone();
        plus.params.get_mut(name).data_mut()[idx] += H;
        let (lp, _) = eval(&plus, false);
        let mut minus = base.clone();
        minus.params.get_mut(name).data_mut()[idx] -= H;
        let (lm, _) = eval(&minus, false);
        let fd = (lp - lm) / (2.0 * H);
        let mag = g.abs().max(fd.abs());
        if mag < 1e-3 {
            continue;
        }
        max_rel = max_rel.max((g - fd).abs() / mag);
        checked += 1;
    }
    (checked, max_rel)
}

#[test]
fn gradients_match_finite_differences() {
    let seeder = Seeder::new(41);
    let theta_old = tiny_model(7);

    // One recorded generation supplies the scored step for the policy losses.
    let task = batch_tasks(&[TaskFamily::Addition], &TaskShape { response_len: 6, word_len: 2 }, 1, &seeder, "acc/fd/task")
        .remove(0);
    let mut stream = seeder.stream("acc/fd/traj");
    let traj = decode(
        &theta_old,
        &task.prompt,
        task.response_len,
        &DecodeConfig {
            strategy: UnmaskStrategy::StaticTopk,
            k_per_step: 2,
            threshold: 0.9,
            block_size: 32,
            max_steps: 6,
        },
        &SamplingConfig::default(),
        &mut stream,
    )
    .unwrap();
    // Threshold 0 keeps every committed token: an untrained model's rows are
    // near-uniform, far below any useful clip bar, and clipping is not what
    // this check exercises.
    let all: Vec<usize> = (0..traj.total_steps()).collect();
    let plans = plan_x0_steps(&traj, &theta_old, 0.0, &all).unwrap();
    let plan: PlannedStep =
        plans.steps.iter().find(|p| p.kept.len() >= 2).expect("a step keeping ≥ 2 tokens").clone();

    // Evaluate away from the behavior snapshot so ratios differ from 1.
    let theta_live = jitter(&theta_old, 0.05, &seeder, "acc/fd/live");
    let theta_ref = jitter(&theta_old, 0.08, &seeder, "acc/fd/ref");
    let ref_lp = {
        let dists = theta_ref.distributions(&plan.o_t).unwrap();
        kept_log_probs(&dists, &plan.kept).0
    };

    let x0 = task.gold_state();
    let mut mlm = |m: &Model<f64>, grad: bool| {
        let mut rng = seeder.stream("acc/fd/mask");
        match m.mlm_loss(&x0, 0.6, &mut rng).unwrap() {
            MlmOutcome::Loss(l) => {
                let v = l.value();
                let g = grad.then(|| {
                    let mut gs = m.params.zeros_like();
                    l.fwd.accumulate_gradients(l.root, 1.0, &mut gs);
                    gs
                });
                (v, g)
            }
            MlmOutcome::Skipped => panic!("deterministic mask draw came up empty"),
        }
    };
    let step_eval = |m: &Model<f64>,
                     grad: bool,
                     adv: f64,
                     mode: PolicyMode,
                     refs: Option<&[f64]>,
                     beta: f64| {
        let e = evaluate_step(m, &plan, adv, mode, refs, beta).unwrap();
        let v = e.fwd.tape.value(e.combined_root).item();
        let g = grad.then(|| {
            let mut gs = m.params.zeros_like();
            e.fwd.accumulate_gradients(e.combined_root, 1.0, &mut gs);
            gs
        });
        (v, g)
    };
    let mut reinforce =
        |m: &Model<f64>, g: bool| step_eval(m, g, 0.7, PolicyMode::Reinforce, None, 0.0);
    let mut ppo = |m: &Model<f64>, g: bool| {
        step_eval(m, g, -0.8, PolicyMode::Ppo { epsilon: 0.2 }, None, 0.0)
    };
    let mut kl = |m: &Model<f64>, g: bool| {
        step_eval(m, g, 0.0, PolicyMode::Ppo { epsilon: 0.2 }, Some(&ref_lp), 1.0)
    };

    let mut rng = seeder.stream("acc/fd/coords");
    let mut detail = String::new();
    let mut pass = true;
    for (name, eval) in [
        ("mlm", &mut mlm as &mut LossEval),
        ("reinforce", &mut reinforce),
        ("ppo", &mut ppo),
        ("k3", &mut kl),
    ] {
        let base = if name == "mlm" { &theta_old } else { &theta_live };
        let (checked, max_rel) = fd_max_rel_err(base, eval, 100, &mut rng);
        pass &= checked >= 100 && max_rel <= 1e-4;
        detail.push_str(&format!("{name}: {checked} coords, max rel err {max_rel:.2e}; "));
    }
    verdict(1, "gradients vs finite differences", pass, detail.trim_end());
}

// ---------------------------------------------------------------------------
// 2. Sampling every step reproduces the exact sequential loss.
// ---------------------------------------------------------------------------

#[test]
fn exhaustive_sampling_equals_sequential_oracle() {
    let mut max_diff = 0.0f64;
    let mut trials = 0usize;
    for trial in 0..50u64 {
        let seeder = Seeder::new(200 + trial);
        let theta_old = tiny_model(300 + trial);
        let theta_live = if trial % 3 == 0 {
            theta_old.clone()
        } else {
            jitter(&theta_old, 0.04, &seeder, "acc/oracle/live")
        };
        let family = [TaskFamily::Addition, TaskFamily::Reverse][trial as usize % 2];
        let shape = TaskShape { response_len: 4 + (trial as usize % 5), word_len: 3 };
        let task = batch_tasks(&[family], &shape, 1, &seeder, "acc/oracle/task").remove(0);
        let cfg = DecodeConfig {
            strategy: if trial % 2 == 0 {
                UnmaskStrategy::StaticTopk
            } else {
                UnmaskStrategy::DynamicThreshold
            },
            k_per_step: 1 + (trial as usize % 2),
            threshold: 0.9,
            block_size: 32,
            max_steps: 8,
        };
        let mut stream = seeder.stream("acc/oracle/decode");
        let traj = decode(
            &theta_old,
            &task.prompt,
            task.response_len,
            &cfg,
            &SamplingConfig::default(),
            &mut stream,
        )
        .unwrap();
        assert!(traj.total_steps() <= 8 && traj.final_state.len() <= 16);

        let adv = if trial % 2 == 0 { 0.9 } else { -0.6 };
        let mode = if trial % 2 == 0 {
            PolicyMode::Reinforce
        } else {
            PolicyMode::Ppo { epsilon: 0.2 }
        };
        let threshold = [0.0, 0.2, 0.5][trial as usize % 3];
        let mut rng = seeder.stream("acc/oracle/select");
        let (sampled, _, picked) = loss_rldf(
            &theta_live,
            &theta_old,
            &traj,
            adv,
            mode,
            64,
            1e-6,
            threshold,
            &mut rng,
        )
        .unwrap();
        assert_eq!(picked.len(), traj.total_steps(), "k ≥ T must select every step");
        let oracle = loss_sequential_oracle(
            &theta_live,
            &theta_old,
            &traj,
            adv,
            mode,
            threshold,
            BaselineTarget::X0,
        )
        .unwrap();
        max_diff = max_diff.max((sampled.value - oracle.value).abs());
        trials += 1;
    }
    let pass = trials == 50 && max_diff <= 1e-10;
    verdict(
        2,
        "k = T sampling equals sequential oracle",
        pass,
        &format!("{trials} trajectories, max |Δloss| = {max_diff:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Without-replacement sampling: enumeration, top-k limit, uniform limit.
// ---------------------------------------------------------------------------

/// Exact per-index inclusion probabilities of sequential without-replacement
/// draws with successive renormalization.
fn exact_inclusion(weights: &[f64], k: usize) -> Vec<f64> {
    fn rec(weights: &[f64], taken: u32, k: usize, p: f64, incl: &mut [f64]) {
        if k == 0 {
            return;
        }
        let total: f64 = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| taken & (1 << i) == 0)
            .map(|(_, w)| w)
            .sum();
        for i in 0..weights.len() {
            if taken & (1 << i) != 0 {
                continue;
            }
            let pi = p * weights[i] / total;
            incl[i] += pi;
            rec(weights, taken | (1 << i), k - 1, pi, incl);
        }
    }
    let mut incl = vec![0.0; weights.len()];
    rec(weights, 0, k.min(weights.len()), 1.0, &mut incl);
    incl
}

#[test]
fn timestep_sampling_matches_enumeration_and_limits() {
    let seeder = Seeder::new(3000);
    let mut rng = seeder.stream("acc/wor");
    let mut pass = true;
    let mut detail = String::new();

    // (a) empirical inclusion vs exact enumeration, 1e5 draws per table.
    let mut worst_abs = 0.0f64;
    for (t_len, k) in [(2, 1), (3, 2), (4, 2), (4, 3), (5, 1), (5, 3), (6, 2), (6, 3)] {
        let unc: Vec<f64> = (0..t_len).map(|_| 3.0 * rng.random::<f64>()).collect();
        let weights = step_softmax(&unc, 1.0).unwrap();
        let exact = exact_inclusion(&weights, k);
        let table =
            StepWeightTable { uncertainties: unc, weights, clamped: false };
        let mut counts = vec![0usize; t_len];
        const DRAWS: usize = 100_000;
        for _ in 0..DRAWS {
            for i in sample_timesteps(&table, k, 1.0, &mut rng) {
                counts[i] += 1;
            }
        }
        for i in 0..t_len {
            worst_abs = worst_abs.max((counts[i] as f64 / DRAWS as f64 - exact[i]).abs());
        }
    }
    pass &= worst_abs <= 0.01;
    detail.push_str(&format!("enumeration: worst |Δp| {worst_abs:.4}; "));

    // (b) τ = 1e-6 reproduces deterministic top-k (ties broken by index).
    let mut topk_ok = true;
    for _ in 0..1000 {
        let t_len = 1 + rng.random_range(0..12u64) as usize;
        let mut unc: Vec<f64> = (0..t_len).map(|_| 5.0 * rng.random::<f64>()).collect();
        if t_len > 1 && rng.random::<f64>() < 0.4 {
            let a = rng.random_range(0..t_len as u64) as usize;
            let b = rng.random_range(0..t_len as u64) as usize;
            unc[a] = unc[b];
        }
        let k = 1 + rng.random_range(0..t_len as u64) as usize;
        let weights = step_softmax(&unc, 1.0).unwrap();
        let table = StepWeightTable { uncertainties: unc.clone(), weights, clamped: false };
        let got = sample_timesteps(&table, k, 1e-6, &mut rng);
        let mut order: Vec<usize> = (0..t_len).collect();
        order.sort_by(|&a, &b| unc[b].partial_cmp(&unc[a]).unwrap().then(a.cmp(&b)));
        let mut want: Vec<usize> = order.into_iter().take(k).collect();
        want.sort_unstable();
        topk_ok &= got == want;
    }
    pass &= topk_ok;
    detail.push_str(&format!("top-k limit on 1000 tables: {topk_ok}; "));

    // (c) τ = 1e9 flattens weights to uniform within 1e-6.
    let mut worst_uniform = 0.0f64;
    for _ in 0..1000 {
        let t_len = 2 + rng.random_range(0..10u64) as usize;
        let unc: Vec<f64> = (0..t_len).map(|_| 50.0 * rng.random::<f64>()).collect();
        let w = step_softmax(&unc, 1e9).unwrap();
        for wi in w {
            worst_uniform = worst_uniform.max((wi - 1.0 / t_len as f64).abs());
        }
    }
    pass &= worst_uniform <= 1e-6;
    detail.push_str(&format!("uniform limit: worst |w − 1/T| {worst_uniform:.2e}"));

    verdict(3, "without-replacement sampling fidelity", pass, &detail);
}

// ---------------------------------------------------------------------------
// 4. The ρ − log ρ − 1 estimator: nonnegative, unbiased for categorical KL.
// ---------------------------------------------------------------------------

#[test]
fn k3_estimator_nonnegative_and_unbiased() {
    let seeder = Seeder::new(4000);
    let mut rng = seeder.stream("acc/k3");

    let mut all_nonneg = true;
    for _ in 0..10_000 {
        let rho = (28.0 * rng.random::<f64>() - 14.0).exp();
        let v = k3(rho);
        all_nonneg &= v >= 0.0 && v.is_finite();
    }

    // Mixing with uniform keeps every symbol's mass ≥ 0.025 so single-sample
    // ratios stay moderate and the Monte-Carlo variance small.
    let dist = |rng: &mut Stream| -> Vec<f64> {
        let raw: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        raw.iter().map(|r| 0.8 * r / sum + 0.2 / 8.0).collect()
    };
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let p_theta = dist(&mut rng);
        let p_ref = dist(&mut rng);
        let exact: f64 =
            p_theta.iter().zip(&p_ref).map(|(&t, &r)| t * (t / r).ln()).sum();
        const N: usize = 100_000;
        let mut acc = 0.0;
        for _ in 0..N {
            let u = rng.random::<f64>();
            let mut cum = 0.0;
            let mut x = p_theta.len() - 1;
            for (i, &t) in p_theta.iter().enumerate() {
                cum += t;
                if u < cum {
                    x = i;
                    break;
                }
            }
            acc += k3(p_ref[x] / p_theta[x]);
        }
        let mc = acc / N as f64;
        worst_rel = worst_rel.max((mc - exact).abs() / exact);
    }
    let pass = all_nonneg && worst_rel <= 0.02;
    verdict(
        4,
        "kl estimator nonnegative and unbiased",
        pass,
        &format!("nonnegative on 1e4 draws: {all_nonneg}; worst MC rel err {worst_rel:.4}"),
    );
}

// ---------------------------------------------------------------------------
// 5. End-to-end learning on addition, three seeds.
// ---------------------------------------------------------------------------

#[test]
fn rl_raises_addition_reward_on_three_seeds() {
    let base = add_base();
    let mut detail = String::new();
    let mut pass = true;
    for seed in [1u64, 2, 3] {
        let before = held_out_reward(base, TaskFamily::Addition, &ADD_SHAPE, seed);
        let trained = if seed == 1 {
            add_trained().0.clone()
        } else {
            run_rl(base.clone(), &[TaskFamily::Addition], &ADD_SHAPE, &rl_config(), seed).0
        };
        let after = held_out_reward(&trained, TaskFamily::Addition, &ADD_SHAPE, seed);
        pass &= after - before >= 0.2;
        detail.push_str(&format!("seed {seed}: {before:.3} → {after:.3}; "));
    }
    verdict(5, "200-step learning gain ≥ 0.2 on 3/3 seeds", pass, detail.trim_end());
}

// ---------------------------------------------------------------------------
// 6. Token clipping: bounded gradients, utility strictly between extremes.
// ---------------------------------------------------------------------------

#[test]
fn token_clipping_bounds_gradients_and_orders_utility() {
    // Behavior policy: the sharp RL product, sampled hot so that non-argmax
    // commits (which it assigns tiny probability) actually occur. Gradients
    // are taken on the diffuse base model, so importance ratios
    // p_live / p_old genuinely explode on exactly those tokens. A uniform
    // advantage of −1 keeps the PPO min on the unbounded branch.
    let theta_old = &add_trained().0;
    let theta_live = add_base();
    let seeder = Seeder::new(606);
    let decode_cfg = DecodeConfig {
        strategy: UnmaskStrategy::StaticTopk,
        k_per_step: 1,
        threshold: 0.9,
        block_size: 32,
        max_steps: 8,
    };
    let hot = SamplingConfig { temperature: 2.0, ..SamplingConfig::default() };

    const BATCHES: usize = 24;
    let mut qualifying: Vec<(f64, f64)> = Vec::new(); // (clipped, unclipped) norms
    let mut util = [0.0f64; 3]; // x_prev, clipped x0, unclipped x0
    let mut util_n = 0usize;
    for batch in 0..BATCHES {
        let task = batch_tasks(
            &[TaskFamily::Addition],
            &ADD_SHAPE,
            1,
            &seeder,
            &format!("acc/clip/task{batch}"),
        )
        .remove(0);
        let mut grads_clip = theta_live.params.zeros_like();
        let mut grads_open = theta_live.params.zeros_like();
        let mut has_tiny = false;
        for b in 0..4usize {
            let mut rng = seeder.stream(&format!("acc/clip/roll{batch}/traj{b}"));
            let traj =
                decode(theta_old, &task.prompt, task.response_len, &decode_cfg, &hot, &mut rng)
                    .unwrap();
            let all: Vec<usize> = (0..traj.total_steps()).collect();
            let clipped = plan_x0_steps(&traj, theta_old, 0.2, &all).unwrap();
            let open = plan_x0_steps(&traj, theta_old, 0.0, &all).unwrap();
            let prev = plan_xprev_steps(&traj, theta_old, &all).unwrap();
            has_tiny |= open
                .steps
                .iter()
                .any(|p| p.old_log_probs.iter().any(|&lp| lp.exp() < 1e-3));
            let n = traj.final_state.response.len() as f64;
            for (which, plans) in [(0usize, &prev), (1, &clipped), (2, &open)] {
                for p in &plans.steps {
                    util[which] += p.kept.len() as f64 / n;
                }
                if which == 0 {
                    util_n += plans.steps.len();
                }
            }
            for (grads, plans) in [(&mut grads_clip, &clipped), (&mut grads_open, &open)] {
                let w = 1.0 / (4.0 * plans.steps.len().max(1) as f64);
                for p in &plans.steps {
                    if p.kept.is_empty() {
                        continue;
                    }
                    let e = evaluate_step(
                        theta_live,
                        p,
                        -1.0,
                        PolicyMode::Ppo { epsilon: 0.2 },
                        None,
                        0.0,
                    )
                    .unwrap();
                    e.fwd.accumulate_gradients(e.combined_root, w, grads);
                }
            }
        }
        if has_tiny {
            qualifying.push((grads_clip.global_norm(), grads_open.global_norm()));
        }
    }
    let u = util.map(|x| x / util_n.max(1) as f64);
    let ordering_ok = u[0] < u[1] && u[1] < u[2];
    let mean_clip: f64 =
        qualifying.iter().map(|q| q.0).sum::<f64>() / qualifying.len().max(1) as f64;
    let mean_open: f64 =
        qualifying.iter().map(|q| q.1).sum::<f64>() / qualifying.len().max(1) as f64;
    let pass = qualifying.len() >= 3 && mean_open >= 10.0 * mean_clip && ordering_ok;
    verdict(
        6,
        "token clipping: gradient bound and utility order",
        pass,
        &format!(
            "{} of {BATCHES} batches had a token below 1e-3; mean grad norm {mean_clip:.3} clipped vs {mean_open:.3} open ({:.1}×); mean utilities xprev {:.3} < clipped {:.3} < open {:.3}: {ordering_ok}",
            qualifying.len(),
            mean_open / mean_clip.max(1e-12),
            u[0],
            u[1],
            u[2],
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Scoring the decoded answer beats scoring per-step commitments.
// ---------------------------------------------------------------------------

#[test]
fn x0_target_is_stabler_than_xprev_on_sort() {
    let base = sort_base();
    let mut cfg = rl_config();
    cfg.estimator = EstimatorKind::SequentialOracle;
    cfg.rollout_batch = 8;
    cfg.total_steps = 100;
    cfg.decode.max_steps = 12;

    let mut x0_cfg = cfg.clone();
    x0_cfg.target = BaselineTarget::X0;
    let mut xp_cfg = cfg;
    xp_cfg.target = BaselineTarget::XPrev;

    let (m_x0, met_x0) = run_rl(base.clone(), &[TaskFamily::Sort], &SORT_SHAPE, &x0_cfg, 5);
    let (m_xp, met_xp) = run_rl(base.clone(), &[TaskFamily::Sort], &SORT_SHAPE, &xp_cfg, 5);

    let x0_finite =
        met_x0.iter().all(|m| !m.flags.iter().any(|f| f == "nonfinite_loss_skipped"));
    let spike = {
        let mut seen: Vec<f64> = Vec::new();
        let mut found = false;
        for m in &met_xp {
            if seen.len() >= 10 {
                let mut s = seen.clone();
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = s[s.len() / 2];
                if median > 0.0 && m.kl >= 5.0 * median {
                    found = true;
                }
            }
            seen.push(m.kl);
        }
        found
    };
    let r_x0 = held_out_reward(&m_x0, TaskFamily::Sort, &SORT_SHAPE, 5);
    let r_xp = held_out_reward(&m_xp, TaskFamily::Sort, &SORT_SHAPE, 5);
    let pass = x0_finite && (spike || r_xp < r_x0);
    verdict(
        7,
        "decoded-answer target stabler than stepwise target",
        pass,
        &format!(
            "x0 all finite: {x0_finite}; xprev kl spike ≥ 5× running median: {spike}; final reward x0 {r_x0:.3} vs xprev {r_xp:.3}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Aggregation fixtures: agreement on equal counts, split on unequal.
// ---------------------------------------------------------------------------

#[test]
fn aggregation_fixtures_agree_and_differ_as_computed() {
    let step = |p: f64, n: usize| StepLoss {
        policy_term: p,
        kl_term: 0.0,
        token_utility: 0.0,
        tokens_used: n,
    };
    let equal = vec![vec![step(1.0, 2)], vec![step(0.4, 2)]];
    let agree = (aggregate_sample_level(&equal, 0.0) - aggregate_token_level(&equal, 0.0)).abs();

    let unequal = vec![vec![step(1.0, 1)], vec![step(0.0, 3)]];
    let sample = aggregate_sample_level(&unequal, 0.0);
    let token = aggregate_token_level(&unequal, 0.0);

    let pass = agree < 1e-12 && (sample - 0.5).abs() < 1e-12 && (token - 0.25).abs() < 1e-12;
    verdict(
        8,
        "normalization fixtures",
        pass,
        &format!("equal-count gap {agree:.1e}; unequal: sample {sample} vs token {token}"),
    );
}

// ---------------------------------------------------------------------------
// 9. Commit probability anticorrelates with distribution entropy.
// ---------------------------------------------------------------------------

#[test]
fn commit_probability_anticorrelates_with_entropy() {
    let model = &add_trained().0;
    let seeder = Seeder::new(909);
    let shape = ADD_SHAPE;
    let mut stats: Vec<TokenStat> = Vec::new();
    let mut i = 0usize;
    while stats.len() < 10_000 {
        let task =
            batch_tasks(&[TaskFamily::Addition], &shape, 1, &seeder, &format!("acc/corr/task{i}"))
                .remove(0);
        let mut rng = seeder.stream(&format!("acc/corr/decode{i}"));
        let traj: DenoiseTrajectory = decode(
            model,
            &task.prompt,
            task.response_len,
            &train_decode(),
            &SamplingConfig::default(),
            &mut rng,
        )
        .unwrap();
        stats.extend(collect_token_stats(model, &traj).unwrap());
        i += 1;
    }
    let (pearson, spearman) = correlate(&stats).unwrap();
    let pass = stats.len() >= 10_000 && pearson <= -0.5;
    verdict(
        9,
        "probability–entropy anticorrelation",
        pass,
        &format!("{} events, pearson {pearson:.3}, spearman {spearman:.3}", stats.len()),
    );
}

// ---------------------------------------------------------------------------
// 10. Bit-exact reproducibility of full training runs.
// ---------------------------------------------------------------------------

#[test]
fn identical_seeds_reproduce_runs_exactly() {
    let init = tiny_model(77);
    let mut cfg = rl_config();
    cfg.total_steps = 10;
    cfg.rollout_batch = 4;
    let run = |m: Model<f64>| {
        let (model, metrics) = run_rl(m, &[TaskFamily::Addition], &ADD_SHAPE, &cfg, 55);
        let trace: Vec<String> =
            metrics.iter().map(|x| serde_json::to_string(x).unwrap()).collect();
        (checkpoint::encode(&model.cfg, &model.params), trace.join("\n"))
    };
    let (ckpt_a, trace_a) = run(init.clone());
    let (ckpt_b, trace_b) = run(init);
    let pass = ckpt_a == ckpt_b && trace_a == trace_b;
    verdict(
        10,
        "determinism of repeated runs",
        pass,
        &format!(
            "10-step metrics traces identical: {}; checkpoints identical: {} ({} bytes)",
            trace_a == trace_b,
            ckpt_a == ckpt_b,
            ckpt_a.len()
        ),
    );
}
