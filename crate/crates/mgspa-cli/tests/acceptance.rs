//! Acceptance gate: ten end-to-end checks over the whole workspace, one
//! test per criterion, each printing a single pass/fail line. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines live.

use mgspa::env::{AttackFamily, AttackSpec, ParticleEnv};
use mgspa::nn::{finite_difference_params, Mlp, OutputActivation};
use mgspa::planning::{self, value_iteration, value_iteration_from};
use mgspa::replay::Transition;
use mgspa::rmaac::{self, frame_stack, AgentBundle, RmaacConfig};
use mgspa::rmaq::{self, LrSchedule};
use mgspa::stage::{self, Method};
use mgspa::testkit::random_shared_model;
use mgspa::{
    build_toy_two_player, harness, JointPolicy, Metric, MgSpaModel, ValueTable,
};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::Command;
use std::time::Instant;

/// Prints the one-line verdict for a criterion and fails the test on a
/// negative outcome, carrying the detail into the panic message.
fn verdict(number: usize, title: &str, ok: bool, detail: &str) {
    let state = if ok { "pass" } else { "fail" };
    println!("acceptance criterion {number:2} [{state}] {title}: {detail}");
    assert!(ok, "criterion {number} ({title}) failed: {detail}");
}

#[test]
fn criterion_01_toy_fixed_point() {
    let start = Instant::now();
    let mut detail = Vec::new();
    let mut ok = true;
    for (gamma, expected) in [(0.99, 50.0), (0.9, 5.0)] {
        let model = build_toy_two_player(gamma);
        let report = value_iteration(&model, 1e-8, 100_000).unwrap();
        let v = report.v_star.agent(0);
        let worst = v.iter().map(|x| (x - expected).abs()).fold(0.0_f64, f64::max);
        ok &= worst <= 1e-4;
        detail.push(format!("gamma {gamma}: max |v - {expected}| = {worst:.2e}"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed.as_secs_f64() < 10.0;
    detail.push(format!("{elapsed:.2?} (budget 10 s)"));
    verdict(1, "planner fixed point on the toy game", ok, &detail.join("; "));
}

#[test]
fn criterion_02_rmaq_convergence() {
    // constant alpha with gamma = 0.99 contracts the bootstrapped tables at
    // rate alpha * (1 - gamma) per visit, so closing a 50-magnitude gap to
    // below one needs about 150 000 uniform-exploration steps; the shorter
    // reference schedule converges in return long before it does in q
    let model = build_toy_two_player(0.99);
    let plan = value_iteration(&model, 1e-8, 100_000).unwrap();
    let q_star = planning::q_from_values(&model, &plan.v_star);
    let mut wins = 0;
    let mut detail = Vec::new();
    let mut within_budget = true;
    for seed in 0..5u64 {
        let start = Instant::now();
        let (mut learner, _) = rmaq::train_rmaq(
            &model,
            LrSchedule::Constant { base: 0.1 },
            6_000,
            25,
            1e-6,
            seed,
            None,
        )
        .unwrap();
        let gap = rmaq::q_sup_gap(&learner.q, &q_star);
        let (policy, _) = rmaq::greedy_policy_from_q(&mut learner, &model).unwrap();
        let values = planning::evaluate_policy(&model, &policy).unwrap();
        let v = values.agent(0);
        let ret = v.sum() / v.len() as f64;
        let seed_ok = (ret - 49.99).abs() <= 0.5 && gap <= 1.0;
        wins += seed_ok as usize;
        within_budget &= start.elapsed().as_secs_f64() < 300.0;
        detail.push(format!("seed {seed}: return {ret:.3}, gap {gap:.3}"));
    }
    let ok = wins >= 4 && within_budget;
    detail.push(format!("{wins}/5 seeds within 49.99 +/- 0.5 and gap <= 1.0"));
    verdict(2, "robust Q-learning reaches the fixed point", ok, &detail.join("; "));
}

#[test]
fn criterion_03_robustness_crossover() {
    let start = Instant::now();
    let model = build_toy_two_player(0.99);
    let policies = vec![
        ("re".to_string(), JointPolicy::uniform(&model)),
        ("ne".to_string(), harness::toy_ne_policy(&model).unwrap()),
    ];
    let probabilities = [0.0, 0.25, 0.5, 0.75, 1.0];
    let rows =
        harness::robustness_matrix(&model, &policies, &probabilities, 40, 250, &[0, 1, 2])
            .unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, &p) in probabilities.iter().enumerate() {
        let re = rows[i].mean_step_reward;
        let ne = rows[probabilities.len() + i].mean_step_reward;
        ok &= (re - 0.5).abs() <= 0.03;
        ok &= (ne - (1.0 - p)).abs() <= 0.03;
        if p > 0.5 {
            ok &= re > ne;
        }
        detail.push(format!("p {p}: re {re:.3}, ne {ne:.3}"));
    }
    let elapsed = start.elapsed();
    ok &= elapsed.as_secs_f64() < 60.0;
    detail.push(format!("{elapsed:.2?} (budget 60 s)"));
    verdict(3, "uniform policy flat at 0.5, pure equilibrium decays as 1 - p", ok, &detail.join("; "));
}

fn random_value_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.gen_range(-10.0..10.0)))
}

#[test]
fn criterion_04_operator_contraction() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut violations = 0usize;
    for _ in 0..20 {
        let gamma = rng.gen_range(0.3..0.95);
        let model = random_shared_model(&mut rng, 3, 3, gamma);
        for _ in 0..10 {
            let v = random_value_vec(&mut rng, model.num_states);
            let u = random_value_vec(&mut rng, model.num_states);
            let lv = planning::apply_minimax_operator(&model, &v).unwrap();
            let lu = planning::apply_minimax_operator(&model, &u).unwrap();
            let lhs = sup_diff(&lv, &lu);
            let rhs = gamma * sup_diff(&v, &u) + 1e-8;
            worst_excess = worst_excess.max(lhs - rhs);
            violations += (lhs > rhs) as usize;
        }
    }
    let elapsed = start.elapsed();
    let ok = violations == 0 && elapsed.as_secs_f64() < 120.0;
    verdict(
        4,
        "minimax operator is a gamma-contraction",
        ok,
        &format!(
            "200 pairs over 20 models, {violations} violations, worst margin {worst_excess:.2e}, {elapsed:.2?} (budget 120 s)"
        ),
    );
}

fn sup_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0_f64, f64::max)
}

#[test]
fn criterion_05_fixed_point_uniqueness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let gamma = rng.gen_range(0.3..0.9);
        let model = random_shared_model(&mut rng, 3, 3, gamma);
        let far = random_value_vec(&mut rng, model.num_states);
        let a = value_iteration(&model, 1e-8, 100_000).unwrap();
        let b = value_iteration_from(&model, far, 1e-8, 100_000).unwrap();
        worst = worst.max(sup_diff(&a.v_star.agent(0), &b.v_star.agent(0)));
    }
    verdict(
        5,
        "value iteration lands on one fixed point from distinct starts",
        worst <= 1e-5,
        &format!("20 models, worst disagreement {worst:.2e} (tolerance 1e-5)"),
    );
}

#[test]
fn criterion_06_stage_solver_certificate() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_expl = 0.0_f64;
    let mut worst_value_gap = 0.0_f64;
    let mut failures = 0usize;
    for _ in 0..100 {
        let gamma = rng.gen_range(0.3..0.95);
        let model = random_shared_model(&mut rng, 3, 3, gamma);
        let v = ValueTable::shared(
            model.num_agents,
            &random_value_vec(&mut rng, model.num_states),
        );
        let game = stage::build_stage_game(&model, &v, None).unwrap();
        match stage::solve_zero_sum(&game, 1e-6, Method::NormalFormLp) {
            Ok(lp) => {
                worst_expl = worst_expl.max(lp.exploitability);
                let rs = stage::regret_self_play_capped(&game, 1e-4, 500_000).unwrap();
                worst_value_gap = worst_value_gap.max((lp.game_value - rs.game_value).abs());
            }
            Err(_) => failures += 1,
        }
    }
    let ok = failures == 0 && worst_expl <= 1e-6 && worst_value_gap <= 1e-3;
    verdict(
        6,
        "linear program certifies equilibria, self-play agrees",
        ok,
        &format!(
            "100 games, {failures} solve failures, worst exploitability {worst_expl:.2e}, worst value gap {worst_value_gap:.2e}, {:.2?}",
            start.elapsed()
        ),
    );
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_bundle(rng: &mut ChaCha8Rng) -> AgentBundle {
    let config = RmaacConfig {
        hidden: rng.gen_range(5..10),
        minibatch: 4,
        buffer_capacity: 64,
        ..RmaacConfig::default()
    };
    let obs = rng.gen_range(2..5);
    let action = rng.gen_range(1..4);
    let state = rng.gen_range(2..6);
    AgentBundle::new(config, 2, obs, action, state, 1.0, rng).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, bundle: &AgentBundle, k: usize) -> Vec<Transition> {
    (0..k)
        .map(|_| Transition {
            state: random_vec(rng, bundle.state_dim),
            observations: (0..2).map(|_| random_vec(rng, bundle.obs_dim)).collect(),
            perturbed: (0..2).map(|_| random_vec(rng, bundle.obs_dim)).collect(),
            agent_actions: (0..2).map(|_| random_vec(rng, bundle.action_dim)).collect(),
            adversary_actions: (0..2).map(|_| random_vec(rng, bundle.obs_dim)).collect(),
            reward: rng.gen_range(-1.0..1.0),
            next_state: random_vec(rng, bundle.state_dim),
            next_observations: (0..2).map(|_| random_vec(rng, bundle.obs_dim)).collect(),
        })
        .collect()
}

/// `[s, a_1..a_N, b_1..b_N]`, the critic's input layout.
fn critic_input(state: &[f64], actions: &[Vec<f64>], perturbations: &[Vec<f64>]) -> Vec<f64> {
    let mut x = state.to_vec();
    for a in actions {
        x.extend_from_slice(a);
    }
    for b in perturbations {
        x.extend_from_slice(b);
    }
    x
}

/// Worst per-entry relative error of `analytic` against the finite
/// differences, skipping entries where the two FD step sizes disagree:
/// those straddle a relu kink, where the loss is not differentiable and no
/// gradient check is meaningful. Returns `(worst error, skipped entries)`.
fn kink_filtered_error(
    analytic: &mgspa::Gradients,
    fd_coarse: &mgspa::Gradients,
    fd_fine: &mgspa::Gradients,
) -> (f64, usize) {
    let entries = |g: &mgspa::Gradients| -> Vec<f64> {
        g.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .chain(g.biases.iter().flat_map(|b| b.iter().copied()))
            .collect()
    };
    let mut worst = 0.0_f64;
    let mut skipped = 0usize;
    for ((a, c), f) in entries(analytic)
        .into_iter()
        .zip(entries(fd_coarse))
        .zip(entries(fd_fine))
    {
        if (c - f).abs() > 1e-7 * c.abs().max(1.0) {
            skipped += 1;
            continue;
        }
        worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1e-6));
    }
    (worst, skipped)
}

#[test]
fn criterion_07_gradient_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst = [0.0_f64; 3]; // critic, actor, adversary
    let mut skipped_total = 0usize;
    for _ in 0..50 {
        let mut bundle = random_bundle(&mut rng);
        let batch = random_batch(&mut rng, &bundle, 4);
        let refs: Vec<&Transition> = batch.iter().collect();

        let targets = rmaac::critic_targets(&bundle, 0, &refs).unwrap();
        let (_, analytic) = rmaac::critic_loss_gradients(&bundle, 0, &refs, &targets).unwrap();
        let base = bundle.nets[0].critic.clone();
        let mut critic_loss = |net: &Mlp| {
            bundle.nets[0].critic = net.clone();
            rmaac::critic_loss_gradients(&bundle, 0, &refs, &targets).unwrap().0
        };
        let coarse = finite_difference_params(&base, 1e-5, &mut critic_loss);
        let fine = finite_difference_params(&base, 5e-6, &mut critic_loss);
        bundle.nets[0].critic = base;
        let (err, skipped) = kink_filtered_error(&analytic, &coarse, &fine);
        worst[0] = worst[0].max(err);
        skipped_total += skipped;

        let analytic = rmaac::actor_gradient(&bundle, 1, &refs).unwrap();
        let base = bundle.nets[1].actor.clone();
        let mut actor_objective = |net: &Mlp| {
            bundle.nets[1].actor = net.clone();
            let mut total = 0.0;
            for t in &refs {
                let a_i = bundle.nets[1].actor.forward(&t.perturbed[1]).unwrap();
                let mut actions = t.agent_actions.clone();
                actions[1] = a_i;
                let x = critic_input(&t.state, &actions, &t.adversary_actions);
                total += bundle.nets[1].critic.forward(&x).unwrap()[0];
            }
            total / refs.len() as f64
        };
        let coarse = finite_difference_params(&base, 1e-5, &mut actor_objective);
        let fine = finite_difference_params(&base, 5e-6, &mut actor_objective);
        bundle.nets[1].actor = base;
        let (err, skipped) = kink_filtered_error(&analytic, &coarse, &fine);
        worst[1] = worst[1].max(err);
        skipped_total += skipped;

        let analytic = rmaac::adversary_gradient(&bundle, 0, &refs).unwrap();
        let base = bundle.nets[0].adversary.clone();
        let mut adversary_objective = |net: &Mlp| {
            bundle.nets[0].adversary = net.clone();
            let mut total = 0.0;
            for t in &refs {
                let b_i = bundle.nets[0].adversary.forward(&t.state).unwrap();
                let s_tilde: Vec<f64> = t.observations[0]
                    .iter()
                    .zip(&b_i)
                    .map(|(s, b)| s + b)
                    .collect();
                let a_i = bundle.nets[0].actor.forward(&s_tilde).unwrap();
                let mut actions = t.agent_actions.clone();
                actions[0] = a_i;
                let mut perturbations = t.adversary_actions.clone();
                perturbations[0] = b_i;
                let x = critic_input(&t.state, &actions, &perturbations);
                total += bundle.nets[0].critic.forward(&x).unwrap()[0];
            }
            total / refs.len() as f64
        };
        let coarse = finite_difference_params(&base, 1e-5, &mut adversary_objective);
        let fine = finite_difference_params(&base, 5e-6, &mut adversary_objective);
        bundle.nets[0].adversary = base;
        let (err, skipped) = kink_filtered_error(&analytic, &coarse, &fine);
        worst[2] = worst[2].max(err);
        skipped_total += skipped;
    }
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|&e| e < 1e-4) && elapsed.as_secs_f64() < 60.0;
    verdict(
        7,
        "assembled gradients match finite differences",
        ok,
        &format!(
            "50 configurations each; worst relative error critic {:.2e}, actor {:.2e}, adversary {:.2e}; {skipped_total} kink-straddling entries excluded; {elapsed:.2?} (budget 60 s)",
            worst[0], worst[1], worst[2]
        ),
    );
}

#[test]
fn criterion_08_actor_critic_robustness() {
    let start = Instant::now();
    let env = ParticleEnv::default();
    let spec = AttackSpec {
        family: AttackFamily::F1,
        epsilon: 0.5,
        sigma: 1.0,
        metric: Metric::LInf,
    };
    let mut wins = 0usize;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let (robust, _) = rmaac::train_rmaac(&env, RmaacConfig::default(), seed).unwrap();
        let baseline_config =
            RmaacConfig { adversaries_enabled: false, ..RmaacConfig::default() };
        let (baseline, _) = rmaac::train_rmaac(&env, baseline_config, seed).unwrap();
        let mean_under_attack = |bundle: &AgentBundle| -> f64 {
            let rewards =
                rmaac::evaluate_under_attack(&env, bundle, Some(&robust), &spec, 40, 1000 + seed)
                    .unwrap();
            rewards.iter().sum::<f64>() / rewards.len() as f64
        };
        let r = mean_under_attack(&robust);
        let b = mean_under_attack(&baseline);
        wins += (r > b) as usize;
        detail.push(format!("seed {seed}: robust {r:.2} vs baseline {b:.2}"));
    }
    let elapsed = start.elapsed();
    let ok = wins >= 4 && elapsed.as_secs_f64() < 1800.0;
    detail.push(format!("{wins}/5 wins, {elapsed:.2?} (budget 30 min)"));
    verdict(
        8,
        "adversarial training beats the clean baseline under attack",
        ok,
        &detail.join("; "),
    );
}

#[test]
fn criterion_09_frame_stacking() {
    // h = 4 trains end to end
    let env = ParticleEnv::default();
    let config = RmaacConfig { frame_stack: 4, episodes: 4, ..RmaacConfig::default() };
    let (bundle, curve) = rmaac::train_rmaac(&env, config, 3).unwrap();
    let stacked_ok = curve.len() == 4
        && curve.iter().all(|p| p.episode_reward.is_finite())
        && bundle.nets[0].actor.input_dim() == 4 * bundle.obs_dim;

    // h = 1 is bit-identical to feeding the raw observation: the stacking
    // transform must return the newest frame unchanged
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut identity_ok = true;
    for _ in 0..100 {
        let depth = rng.gen_range(1..6);
        let history: Vec<Vec<f64>> = (0..depth).map(|_| random_vec(&mut rng, 10)).collect();
        let stacked = frame_stack(&history, 1).unwrap();
        identity_ok &= stacked.len() == history[0].len()
            && stacked
                .iter()
                .zip(&history[0])
                .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let ok = stacked_ok && identity_ok;
    verdict(
        9,
        "history stacking trains at h = 4 and is the identity at h = 1",
        ok,
        &format!("h4 training {}, 100 bitwise identity checks {}", stacked_ok, identity_ok),
    );
}

fn run_cli(args: &[&str], config: &std::path::Path, out: &std::path::Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_mgspa"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success(), "command {args:?} failed");
}

#[test]
fn criterion_10_seed_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.toml");
    std::fs::write(
        &config_path,
        r#"
seeds = [11]

[rmaq]
episodes = 40

[rmaac]
episodes = 2

[eval]
episodes = 5
steps_per_episode = 50
"#,
    )
    .unwrap();
    let commands: &[&[&str]] = &[
        &["plan"],
        &["train-rmaq"],
        &["train-rmaac"],
        &["evaluate", "--policy", "ne", "--attack-prob", "0.5"],
        &["matrix"],
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for args in commands {
        let out_a = dir.path().join(format!("a_{}", args[0]));
        let out_b = dir.path().join(format!("b_{}", args[0]));
        run_cli(args, &config_path, &out_a);
        run_cli(args, &config_path, &out_b);
        // the echoed config embeds the output path, which differs by design
        let mut names: Vec<String> = std::fs::read_dir(&out_a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n != "config.toml")
            .collect();
        names.sort();
        ok &= !names.is_empty();
        for name in &names {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            ok &= a == b;
        }
        detail.push(format!("{} ({} artifacts)", args[0], names.len()));
    }
    verdict(
        10,
        "fixed seeds reproduce bit-identical artifacts",
        ok,
        &detail.join("; "),
    );
}

// keep the unused-import lints honest for items only some criteria touch
#[allow(dead_code)]
fn _typecheck_reexports(_: &Mlp, _: OutputActivation, _: &MgSpaModel) {}
