//! `mgspa`: exact planning, robust Q-learning, robust actor-critic, and
//! robustness evaluation for Markov games with state perturbation
//! adversaries. Errors exit nonzero with a JSON record on stderr.

use clap::{Parser, Subcommand, ValueEnum};
use mgspa::harness::{self, Overrides};
use mgspa::model::{serialize as model_io, JointPolicy, ValueTable};
use mgspa::stage::{self, Method};
use mgspa::{planning, rmaac, rmaq, MgSpaModel, ParticleEnv};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mgspa", version, about = "Robust multi-agent RL laboratory")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; results print to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMethod {
    Lp,
    Regret,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyName {
    /// The robust (all-uniform) equilibrium policy.
    Re,
    /// The non-robust pure equilibrium of the toy game.
    Ne,
}

#[derive(Subcommand)]
enum Command {
    /// Value-iterate to the fixed point and extract the equilibrium policy.
    Plan {
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train tabular robust Q-learning and emit the convergence curve.
    TrainRmaq {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the robust actor-critic on the particle environment.
    TrainRmaac {
        #[arg(long)]
        episodes: Option<usize>,
        /// Disable the perturbation adversaries (non-robust baseline).
        #[arg(long)]
        no_adversary: bool,
    },
    /// Evaluate a policy on the toy game under a probability-p flip attack.
    Evaluate {
        #[arg(long, value_enum, default_value = "re")]
        policy: PolicyName,
        #[arg(long, default_value_t = 0.0)]
        attack_prob: f64,
    },
    /// Solve one stage game at a constant value vector.
    SolveStage {
        /// Constant continuation value per state.
        #[arg(long, default_value_t = 0.0)]
        value: f64,
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, value_enum, default_value = "lp")]
        method: SolveMethod,
    },
    /// Robustness matrix: {re, ne} policies x flip probabilities.
    Matrix,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let record = serde_json::json!({
            "error": e.to_string(),
            "kind": format!("{e:?}").split_whitespace().next().unwrap_or("Unknown")
                .trim_end_matches(['(', '{']),
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> mgspa::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out.as_ref().map(|p| p.display().to_string()),
        ..Overrides::default()
    };
    let mut config = harness::load_config(cli.config.as_deref(), &overrides)?;
    let out_dir = config.out_dir.clone().map(PathBuf::from);
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        // echo the resolved configuration for reproducibility
        std::fs::write(dir.join("config.toml"), harness::config_to_toml(&config)?)?;
    }
    match cli.command {
        Command::Plan { gamma, tol } => {
            if let Some(g) = gamma {
                config.planning.gamma = g;
            }
            if let Some(t) = tol {
                config.planning.tol = t;
            }
            let model = load_model(&config)?;
            let report =
                planning::value_iteration(&model, config.planning.tol, config.planning.max_iters)?;
            let text = serde_json::to_string_pretty(&report)?;
            emit(out_dir.as_deref(), "plan.json", &text)?;
            let v = report.v_star.agent(0);
            println!(
                "fixed point after {} iterations, residual {:.3e}, v = {:?}",
                report.iterations,
                report.residual,
                v.to_vec()
            );
            Ok(())
        }
        Command::TrainRmaq { episodes } => {
            if let Some(n) = episodes {
                config.rmaq.episodes = n;
            }
            let model = load_model(&config)?;
            let plan =
                planning::value_iteration(&model, config.planning.tol, config.planning.max_iters)?;
            let q_star = planning::q_from_values(&model, &plan.v_star);
            for &seed in &config.seeds.clone() {
                let (learner, curve) = rmaq::train_rmaq(
                    &model,
                    config.rmaq.lr_schedule()?,
                    config.rmaq.episodes,
                    config.rmaq.steps_per_episode,
                    config.rmaq.stage_tol,
                    seed,
                    Some(&q_star),
                )?;
                emit(
                    out_dir.as_deref(),
                    &format!("rmaq_curve_seed{seed}.csv"),
                    &rmaq::curve_to_csv(&curve)?,
                )?;
                emit(
                    out_dir.as_deref(),
                    &format!("rmaq_q_seed{seed}.json"),
                    &serde_json::to_string_pretty(&learner.q)?,
                )?;
                if let Some(last) = curve.last() {
                    println!(
                        "seed {seed}: final discounted return {:.4}, q-gap {:.4}",
                        last.discounted_return,
                        last.q_gap.unwrap_or(f64::NAN)
                    );
                }
            }
            Ok(())
        }
        Command::TrainRmaac { episodes, no_adversary } => {
            if let Some(n) = episodes {
                config.rmaac.episodes = n;
            }
            if no_adversary {
                config.rmaac.adversaries_enabled = false;
            }
            let env = ParticleEnv::default();
            for &seed in &config.seeds.clone() {
                let (bundle, curve) = rmaac::train_rmaac(&env, config.rmaac.clone(), seed)?;
                emit(
                    out_dir.as_deref(),
                    &format!("rmaac_curve_seed{seed}.csv"),
                    &rmaac::curve_to_csv(&curve)?,
                )?;
                emit(
                    out_dir.as_deref(),
                    &format!("rmaac_checkpoint_seed{seed}.json"),
                    &serde_json::to_string(&bundle.to_checkpoint())?,
                )?;
                let tail: Vec<f64> = curve
                    .iter()
                    .rev()
                    .take(20)
                    .map(|p| p.episode_reward)
                    .collect();
                let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
                println!("seed {seed}: mean reward over final 20 episodes {mean:.3}");
            }
            Ok(())
        }
        Command::Evaluate { policy, attack_prob } => {
            let model = load_model(&config)?;
            let joint = named_policy(&model, policy)?;
            for &seed in &config.seeds {
                let stats = harness::evaluate_tabular(
                    &model,
                    &joint,
                    attack_prob,
                    config.eval.episodes,
                    config.eval.steps_per_episode,
                    seed,
                )?;
                let text = serde_json::to_string_pretty(&stats)?;
                emit(out_dir.as_deref(), &format!("eval_seed{seed}.json"), &text)?;
                println!(
                    "seed {seed}: mean step reward {:.4}, mean episode reward {:.2}",
                    stats.mean_step_reward, stats.mean_episode_reward
                );
            }
            Ok(())
        }
        Command::SolveStage { value, tol, method } => {
            let model = load_model(&config)?;
            let v = ValueTable::shared(
                model.num_agents,
                &ndarray_const(model.num_states, value),
            );
            let game = stage::build_stage_game(&model, &v, None)?;
            let method = match method {
                SolveMethod::Lp => Method::NormalFormLp,
                SolveMethod::Regret => Method::RegretSelfPlay,
            };
            let report = stage::solve_zero_sum(&game, tol, method)?;
            let text = stage::serialize::report_to_string(&report)?;
            emit(out_dir.as_deref(), "stage_report.json", &text)?;
            println!(
                "game value {:.6}, exploitability {:.3e}",
                report.game_value, report.exploitability
            );
            Ok(())
        }
        Command::Matrix => {
            let model = load_model(&config)?;
            let policies = vec![
                ("re".to_string(), named_policy(&model, PolicyName::Re)?),
                ("ne".to_string(), named_policy(&model, PolicyName::Ne)?),
            ];
            let rows = harness::robustness_matrix(
                &model,
                &policies,
                &config.eval.attack_probabilities,
                config.eval.episodes,
                config.eval.steps_per_episode,
                &config.seeds,
            )?;
            let csv = harness::matrix_to_csv(&rows)?;
            emit(out_dir.as_deref(), "matrix.csv", &csv)?;
            if out_dir.is_none() {
                print!("{csv}");
            } else {
                println!("{} rows written", rows.len());
            }
            Ok(())
        }
    }
}

fn load_model(config: &harness::ExperimentConfig) -> mgspa::Result<MgSpaModel> {
    if config.model == "toy" {
        Ok(mgspa::build_toy_two_player(config.planning.gamma))
    } else {
        model_io::load(Path::new(&config.model))
    }
}

fn named_policy(model: &MgSpaModel, name: PolicyName) -> mgspa::Result<JointPolicy> {
    match name {
        PolicyName::Re => Ok(JointPolicy::uniform(model)),
        PolicyName::Ne => harness::toy_ne_policy(model),
    }
}

fn ndarray_const(n: usize, value: f64) -> ndarray::Array1<f64> {
    ndarray::Array1::from_elem(n, value)
}

/// Write into the output directory when one is set, else to stdout.
fn emit(out_dir: Option<&Path>, name: &str, text: &str) -> mgspa::Result<()> {
    match out_dir {
        Some(dir) => {
            std::fs::write(dir.join(name), text)?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}
