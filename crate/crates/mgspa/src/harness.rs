//! Experiment configuration, tabular robustness evaluation, and CSV
//! emission — the glue between the algorithms and the command line.

use crate::error::{Error, Result};
use crate::model::{discounted_return, JointPolicy, MgSpaModel};
use crate::rmaac::RmaacConfig;
use crate::rmaq::LrSchedule;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Top-level experiment configuration, read from TOML. Unknown keys are
/// rejected so typos fail loudly; every field has a default so an empty
/// file resolves to the reference hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `"toy"` or a path to a serialized model.
    pub model: String,
    pub seeds: Vec<u64>,
    pub out_dir: Option<String>,
    pub planning: PlanningConfig,
    pub rmaq: RmaqConfig,
    pub rmaac: RmaacConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "toy".into(),
            seeds: vec![0],
            out_dir: None,
            planning: PlanningConfig::default(),
            rmaq: RmaqConfig::default(),
            rmaac: RmaacConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningConfig {
    pub gamma: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self { gamma: 0.99, tol: 1e-6, max_iters: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmaqConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub alpha: f64,
    /// `"constant"` or `"per-visit-harmonic"`.
    pub schedule: String,
    pub stage_tol: f64,
}

impl Default for RmaqConfig {
    fn default() -> Self {
        Self {
            episodes: 400,
            steps_per_episode: 25,
            alpha: 0.1,
            schedule: "constant".into(),
            stage_tol: 1e-6,
        }
    }
}

impl RmaqConfig {
    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        match self.schedule.as_str() {
            "constant" => Ok(LrSchedule::Constant { base: self.alpha }),
            "per-visit-harmonic" => Ok(LrSchedule::PerVisitHarmonic { base: self.alpha }),
            other => Err(Error::Config(format!("unknown learning-rate schedule '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Attack probabilities for the tabular flip evaluation.
    pub attack_probabilities: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 40,
            steps_per_episode: 250,
            attack_probabilities: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

/// Values a CLI invocation may override after the file is parsed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub out_dir: Option<String>,
    pub episodes: Option<usize>,
}

/// Parse a TOML config file and apply overrides; a missing path means all
/// defaults. Unknown or ill-typed keys surface the offending key name.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.seeds = vec![seed];
    }
    if let Some(gamma) = overrides.gamma {
        config.planning.gamma = gamma;
        config.rmaac.gamma = gamma;
    }
    if let Some(dir) = &overrides.out_dir {
        config.out_dir = Some(dir.clone());
    }
    if let Some(episodes) = overrides.episodes {
        config.rmaq.episodes = episodes;
        config.rmaac.episodes = episodes;
        config.eval.episodes = episodes;
    }
    Ok(config)
}

pub fn config_to_toml(config: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Serde(e.to_string()))
}

/// Summary statistics of an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_episode_reward: f64,
    /// Population variance of per-episode rewards.
    pub reward_variance: f64,
    pub mean_discounted_return: f64,
    pub mean_step_reward: f64,
    pub episodes: usize,
    pub seed: u64,
}

fn stats_from_episodes(
    episode_rewards: &[f64],
    discounted: &[f64],
    steps: usize,
    seed: u64,
) -> EvalStats {
    let n = episode_rewards.len().max(1) as f64;
    let mean = episode_rewards.iter().sum::<f64>() / n;
    let variance = episode_rewards
        .iter()
        .map(|r| (r - mean).powi(2))
        .sum::<f64>()
        / n;
    EvalStats {
        mean_episode_reward: mean,
        reward_variance: variance,
        mean_discounted_return: discounted.iter().sum::<f64>() / n,
        mean_step_reward: mean / steps.max(1) as f64,
        episodes: episode_rewards.len(),
        seed,
    }
}

/// Adversary tables realizing the probability-`p` flip attack: with
/// probability `p` an adversary's move sends the observation to a
/// different state (uniformly among such moves), otherwise it reports the
/// state truthfully.
pub fn flip_attack_policy(model: &MgSpaModel, p: f64) -> Result<Vec<Array2<f64>>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("attack probability {p} outside [0, 1]")));
    }
    let mut tables = Vec::with_capacity(model.num_agents);
    for agent in 0..model.num_agents {
        let nb = model.adversary_actions[agent];
        let mut table = Array2::zeros((model.num_states, nb));
        for s in 0..model.num_states {
            let mut fixing = Vec::new();
            let mut moving = Vec::new();
            for b in 0..nb {
                if model.perturb.apply_discrete(agent, s, b)? == s {
                    fixing.push(b);
                } else {
                    moving.push(b);
                }
            }
            if fixing.is_empty() || (moving.is_empty() && p > 0.0) {
                return Err(Error::Config(format!(
                    "state {s} lacks the moves needed for a flip attack"
                )));
            }
            for &b in &fixing {
                table[[s, b]] = (1.0 - p) / fixing.len() as f64;
            }
            for &b in &moving {
                table[[s, b]] = p / moving.len() as f64;
            }
        }
        tables.push(table);
    }
    Ok(tables)
}

/// Roll out the agent policy against the probability-`p` flip attack and
/// summarize the episode rewards.
pub fn evaluate_tabular(
    model: &MgSpaModel,
    policy: &JointPolicy,
    p: f64,
    episodes: usize,
    steps_per_episode: usize,
    seed: u64,
) -> Result<EvalStats> {
    let combined = JointPolicy {
        agents: policy.agents.clone(),
        adversaries: flip_attack_policy(model, p)?,
    };
    combined.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episode_rewards = Vec::with_capacity(episodes);
    let mut discounted = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = 0usize;
        let mut rewards = Vec::with_capacity(steps_per_episode);
        for _ in 0..steps_per_episode {
            let record = model.step(state, &combined, &mut rng)?;
            rewards.push(record.rewards.clone());
            state = record.next_state;
        }
        episode_rewards.push(rewards.iter().map(|r| r[0]).sum());
        discounted.push(discounted_return(&rewards, model.gamma)[0]);
    }
    Ok(stats_from_episodes(&episode_rewards, &discounted, steps_per_episode, seed))
}

/// The always-match / always-differ pure equilibrium of the toy game:
/// agent 1 plays action 1 everywhere, agent 2 matches at state 0 and
/// differs at state 1, believing its observation.
pub fn toy_ne_policy(model: &MgSpaModel) -> Result<JointPolicy> {
    if model.num_states != 2 || model.agent_actions != vec![2, 2] {
        return Err(Error::Config("the pure equilibrium policy is toy-game-specific".into()));
    }
    let mut policy = JointPolicy::uniform(model);
    policy.agents[0].fill(0.0);
    policy.agents[0][[0, 1]] = 1.0;
    policy.agents[0][[1, 1]] = 1.0;
    policy.agents[1].fill(0.0);
    policy.agents[1][[0, 1]] = 1.0;
    policy.agents[1][[1, 0]] = 1.0;
    Ok(policy)
}

/// One row of the robustness matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub policy: String,
    pub attack: String,
    pub mean_episode_reward: f64,
    pub reward_variance: f64,
    pub mean_step_reward: f64,
    pub seeds: usize,
    pub status: String,
}

/// Cross product of named policies and flip probabilities, aggregated
/// across seeds; ordering is deterministic (policy-major, then attack).
pub fn robustness_matrix(
    model: &MgSpaModel,
    policies: &[(String, JointPolicy)],
    probabilities: &[f64],
    episodes: usize,
    steps_per_episode: usize,
    seeds: &[u64],
) -> Result<Vec<MatrixRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("robustness matrix needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(policies.len() * probabilities.len());
    for (name, policy) in policies {
        for &p in probabilities {
            let mut means = Vec::with_capacity(seeds.len());
            let mut variances = Vec::with_capacity(seeds.len());
            let mut step_means = Vec::with_capacity(seeds.len());
            let mut status = "ok".to_string();
            for &seed in seeds {
                match evaluate_tabular(model, policy, p, episodes, steps_per_episode, seed) {
                    Ok(stats) => {
                        means.push(stats.mean_episode_reward);
                        variances.push(stats.reward_variance);
                        step_means.push(stats.mean_step_reward);
                    }
                    Err(e) => {
                        status = format!("failed: {e}");
                        break;
                    }
                }
            }
            let n = means.len().max(1) as f64;
            rows.push(MatrixRow {
                policy: name.clone(),
                attack: format!("flip-p{p}"),
                mean_episode_reward: means.iter().sum::<f64>() / n,
                reward_variance: variances.iter().sum::<f64>() / n,
                mean_step_reward: step_means.iter().sum::<f64>() / n,
                seeds: means.len(),
                status,
            });
        }
    }
    Ok(rows)
}

/// Schema-versioned CSV for the matrix rows.
pub fn matrix_to_csv(rows: &[MatrixRow]) -> Result<String> {
    let mut out = String::from("# robustness-matrix schema v1\n");
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "policy",
            "attack",
            "mean_episode_reward",
            "reward_variance",
            "mean_step_reward",
            "seeds",
            "status",
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for row in rows {
        writer
            .write_record([
                row.policy.clone(),
                row.attack.clone(),
                format!("{}", row.mean_episode_reward),
                format!("{}", row.reward_variance),
                format!("{}", row.mean_step_reward),
                row.seeds.to_string(),
                row.status.clone(),
            ])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Serde(e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_toy_two_player;
    use approx::assert_abs_diff_eq;

    #[test]
    fn empty_config_resolves_to_defaults() {
        let config: ExperimentConfig = toml::from_str("").unwrap();
        assert_abs_diff_eq!(config.rmaac.gamma, 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(config.rmaac.tau, 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(config.rmaac.epsilon, 0.5, epsilon = 1e-15);
        assert_eq!(config.rmaq.episodes, 400);
        assert_eq!(config.model, "toy");
    }

    #[test]
    fn misspelled_key_is_rejected_by_name() {
        let err = toml::from_str::<ExperimentConfig>("gama = 0.5").unwrap_err();
        assert!(err.to_string().contains("gama"), "error was: {err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, "seeds = [1, 2, 3]\n[planning]\ngamma = 0.9\n").unwrap();
        let overrides = Overrides { seed: Some(7), gamma: Some(0.99), ..Overrides::default() };
        let config = load_config(Some(&path), &overrides).unwrap();
        assert_eq!(config.seeds, vec![7]);
        assert_abs_diff_eq!(config.planning.gamma, 0.99, epsilon = 1e-15);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config_to_toml(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn uniform_policy_is_flat_across_attack_probabilities() {
        let model = build_toy_two_player(0.99);
        let policy = JointPolicy::uniform(&model);
        for &p in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let stats = evaluate_tabular(&model, &policy, p, 10, 1000, 5).unwrap();
            assert!(
                (stats.mean_step_reward - 0.5).abs() <= 0.03,
                "p={p}: step reward {}",
                stats.mean_step_reward
            );
        }
    }

    #[test]
    fn pure_equilibrium_degrades_linearly_with_attack() {
        let model = build_toy_two_player(0.99);
        let policy = toy_ne_policy(&model).unwrap();
        for &p in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let stats = evaluate_tabular(&model, &policy, p, 10, 1000, 6).unwrap();
            assert!(
                (stats.mean_step_reward - (1.0 - p)).abs() <= 0.03,
                "p={p}: step reward {}",
                stats.mean_step_reward
            );
        }
    }

    #[test]
    fn flip_policy_rows_are_distributions() {
        let model = build_toy_two_player(0.99);
        let tables = flip_attack_policy(&model, 0.4).unwrap();
        for table in &tables {
            for row in table.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            }
        }
        // identity mass at 1 - p
        assert_abs_diff_eq!(tables[0][[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(tables[0][[0, 1]], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn matrix_has_cross_product_cardinality_and_is_deterministic() {
        let model = build_toy_two_player(0.99);
        let policies = vec![
            ("re".to_string(), JointPolicy::uniform(&model)),
            ("ne".to_string(), toy_ne_policy(&model).unwrap()),
        ];
        let probabilities = [0.0, 0.5, 1.0];
        let run = || {
            let rows =
                robustness_matrix(&model, &policies, &probabilities, 4, 200, &[1, 2]).unwrap();
            matrix_to_csv(&rows).unwrap()
        };
        let a = run();
        assert_eq!(a.lines().count(), 1 + 1 + 6); // comment, header, 6 rows
        assert_eq!(a, run());
    }

    #[test]
    fn matrix_shows_the_crossover() {
        let model = build_toy_two_player(0.99);
        let policies = vec![
            ("re".to_string(), JointPolicy::uniform(&model)),
            ("ne".to_string(), toy_ne_policy(&model).unwrap()),
        ];
        let rows =
            robustness_matrix(&model, &policies, &[0.75, 1.0], 10, 500, &[3]).unwrap();
        let get = |policy: &str, attack: &str| {
            rows.iter()
                .find(|r| r.policy == policy && r.attack == attack)
                .unwrap()
                .mean_step_reward
        };
        assert!(get("re", "flip-p0.75") > get("ne", "flip-p0.75"));
        assert!(get("re", "flip-p1") > get("ne", "flip-p1"));
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let model = build_toy_two_player(0.99);
        assert!(flip_attack_policy(&model, 1.5).is_err());
        assert!(flip_attack_policy(&model, -0.1).is_err());
    }
}
