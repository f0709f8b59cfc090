//! Tabular robust multi-agent Q-learning: each update bootstraps through
//! the equilibrium value of the stage game built on the current tables.

use crate::error::{Error, Result};
use crate::model::{JointPolicy, MgSpaModel, QTable};
use crate::planning;
use crate::stage::{self, Method, SolveReport};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Learning-rate schedule; the harmonic variant is square-summable per
/// visited triple while the constant one mirrors the reference experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant { base: f64 },
    PerVisitHarmonic { base: f64 },
}

impl LrSchedule {
    /// Rate for a triple that has been visited `visits` times before.
    pub fn rate(&self, visits: u64) -> f64 {
        match *self {
            LrSchedule::Constant { base } => base,
            LrSchedule::PerVisitHarmonic { base } => base / (1.0 + visits as f64),
        }
    }

    fn validate(&self) -> Result<()> {
        let base = match *self {
            LrSchedule::Constant { base } | LrSchedule::PerVisitHarmonic { base } => base,
        };
        if !(0.0..=1.0).contains(&base) {
            return Err(Error::Config(format!("learning-rate base {base} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Exploitability a degenerate stage solve may carry into the bootstrap
/// before the update is skipped instead.
const BOOTSTRAP_SLACK: f64 = 1e-3;

/// One observed interaction used by the update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub joint_agent_action: usize,
    pub joint_adversary_action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone)]
pub struct RmaqLearner {
    pub q: QTable,
    pub lr_schedule: LrSchedule,
    /// Visits per `(s, joint a, joint b)` before the current step.
    pub visit_counts: Array3<u64>,
    pub stage_tol: f64,
    /// Updates skipped because the stage solve failed.
    pub skipped_updates: u64,
    /// Bumped on every write to `q`; keys the stage-value cache.
    version: u64,
    cache: Option<(u64, Vec<f64>)>,
}

impl RmaqLearner {
    pub fn new(model: &MgSpaModel, lr_schedule: LrSchedule, stage_tol: f64) -> Result<Self> {
        if !model.is_shared_reward() {
            return Err(Error::Config("learner requires a shared-reward model".into()));
        }
        lr_schedule.validate()?;
        Ok(Self {
            q: QTable::zeros(model),
            lr_schedule,
            visit_counts: Array3::zeros((
                model.num_states,
                model.joint_agent_actions(),
                model.joint_adversary_actions(),
            )),
            stage_tol,
            skipped_updates: 0,
            version: 0,
            cache: None,
        })
    }

    /// Per-state equilibrium values of the stage game on the current `q`,
    /// cached until the next table write. A solve that misses the strict
    /// tolerance but certifies exploitability below `BOOTSTRAP_SLACK` is
    /// still accepted — the bootstrap tolerates that much bias.
    pub fn stage_values(&mut self, model: &MgSpaModel) -> Result<&[f64]> {
        if self.cache.as_ref().map(|(v, _)| *v) != Some(self.version) {
            let game = stage::build_stage_game_from_q(model, &self.q, None)?;
            let values = match stage::solve_zero_sum(&game, self.stage_tol, Method::NormalFormLp) {
                Ok(report) => report.per_state_values,
                Err(Error::SolveTolerance { exploitability, report, tol })
                    if exploitability <= BOOTSTRAP_SLACK =>
                {
                    let _ = tol;
                    report.per_state_values
                }
                Err(e) => return Err(e),
            };
            self.cache = Some((self.version, values));
        }
        Ok(&self.cache.as_ref().unwrap().1)
    }
}

/// One application of the update rule at the visited triple; every other
/// entry is untouched. A stage-solve failure skips the update and counts it.
pub fn rmaq_update(learner: &mut RmaqLearner, model: &MgSpaModel, t: &Transition) -> Result<()> {
    let (s, ja, jb) = (t.state, t.joint_agent_action, t.joint_adversary_action);
    if s >= model.num_states
        || ja >= model.joint_agent_actions()
        || jb >= model.joint_adversary_actions()
        || t.next_state >= model.num_states
    {
        return Err(Error::Shape("transition indices out of range".into()));
    }
    let continuation = match learner.stage_values(model) {
        Ok(values) => values[t.next_state],
        Err(Error::SolveTolerance { .. }) | Err(Error::NotConverged { .. }) => {
            learner.skipped_updates += 1;
            return Ok(());
        }
        Err(e) => return Err(e),
    };
    let alpha = learner.lr_schedule.rate(learner.visit_counts[[s, ja, jb]]);
    let target = t.reward + model.gamma * continuation;
    for i in 0..model.num_agents {
        let old = learner.q.q[[i, s, ja, jb]];
        learner.q.q[[i, s, ja, jb]] = (1.0 - alpha) * old + alpha * target;
    }
    learner.visit_counts[[s, ja, jb]] += 1;
    learner.version += 1;
    let bound = model.reward_bound / (1.0 - model.gamma) + 1.0;
    debug_assert!(
        learner.q.q[[0, s, ja, jb]].abs() <= bound,
        "q left its theoretical bound"
    );
    Ok(())
}

/// One point of the convergence curve: exact discounted return of the
/// current greedy policy and, when a reference is given, the q-gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub discounted_return: f64,
    pub q_gap: Option<f64>,
}

/// Uniform-exploration trainer: joint actions on both sides are sampled
/// uniformly so every triple keeps being visited. The curve evaluates the
/// greedy policy exactly (linear solve), averaged over a uniform start.
pub fn train_rmaq(
    model: &MgSpaModel,
    lr_schedule: LrSchedule,
    episodes: usize,
    steps_per_episode: usize,
    stage_tol: f64,
    seed: u64,
    reference: Option<&QTable>,
) -> Result<(RmaqLearner, Vec<CurvePoint>)> {
    let mut learner = RmaqLearner::new(model, lr_schedule, stage_tol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(episodes);
    let mut state = 0usize;
    for episode in 1..=episodes {
        for _ in 0..steps_per_episode {
            let ja = rng.gen_range(0..model.joint_agent_actions());
            let jb = rng.gen_range(0..model.joint_adversary_actions());
            let reward = model.rewards[[0, state, ja, jb]];
            let row: Vec<f64> = model
                .transition
                .slice(ndarray::s![state, ja, jb, ..])
                .to_vec();
            let next_state = sample_index(&row, &mut rng);
            rmaq_update(
                &mut learner,
                model,
                &Transition {
                    state,
                    joint_agent_action: ja,
                    joint_adversary_action: jb,
                    reward,
                    next_state,
                },
            )?;
            state = next_state;
        }
        // curve point: cheap capped self-play for the greedy strategy, then
        // exact evaluation of its factorized marginals
        let game = stage::build_stage_game_from_q(model, &learner.q, None)?;
        let report = stage::regret_self_play_capped(&game, 1e-4, 4096)?;
        let policy = stage::extract_marginals(&game, &report.strategy, model)?.policy;
        let values = planning::evaluate_policy(model, &policy)?;
        let v0 = values.agent(0);
        let discounted_return = v0.sum() / v0.len() as f64;
        let q_gap = reference.map(|q_star| q_sup_gap(&learner.q, q_star));
        curve.push(CurvePoint { episode, discounted_return, q_gap });
    }
    Ok((learner, curve))
}

/// `||q - q_*||_inf` across agents and triples.
pub fn q_sup_gap(q: &QTable, q_star: &QTable) -> f64 {
    q.q.iter()
        .zip(q_star.q.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max)
}

/// Solve the stage game on the learner's tables and pull factorized
/// marginals; regret self-play keeps symmetric games on the symmetric
/// equilibrium, the linear program backs it up on harder instances.
pub fn greedy_policy_from_q(
    learner: &mut RmaqLearner,
    model: &MgSpaModel,
) -> Result<(JointPolicy, SolveReport)> {
    let game = stage::build_stage_game_from_q(model, &learner.q, None)?;
    let tol = learner.stage_tol.max(1e-5);
    let report = match stage::solve_zero_sum(&game, tol, Method::RegretSelfPlay) {
        Ok(report) => report,
        Err(Error::SolveTolerance { report: regret_best, .. }) => {
            match stage::solve_zero_sum(&game, learner.stage_tol, Method::NormalFormLp) {
                Ok(report) => report,
                // keep whichever certificate is tighter
                Err(Error::SolveTolerance { report: lp_best, .. }) => {
                    if lp_best.exploitability <= regret_best.exploitability {
                        *lp_best
                    } else {
                        *regret_best
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(e) => return Err(e),
    };
    // the centralized solve certifies the value, but its strategies may
    // coordinate through the shared infoset; re-solve over product-form
    // tables for the executable policy, falling back to the centralized
    // marginals only if the product search certifies worse
    let marginals = stage::extract_marginals(&game, &report.strategy, model)?;
    let targets = report.per_state_values.clone();
    let product = stage::solve_product(&game, model, Some(&targets), tol, 20_000)?;
    let (_, marginal_gain) = stage::product_exploitability(
        &game,
        model,
        &marginals.policy,
        Some(&targets),
        &game.state_weights,
    );
    let policy = if product.exploitability <= marginal_gain {
        product.policy
    } else {
        marginals.policy
    };
    Ok((policy, report))
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Writes the convergence curve as `episode,discounted_return,q_gap`.
pub fn curve_to_csv(curve: &[CurvePoint]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["episode", "discounted_return", "q_gap"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for point in curve {
        let gap = point.q_gap.map_or(String::new(), |g| format!("{g}"));
        writer
            .write_record([
                point.episode.to_string(),
                format!("{}", point.discounted_return),
                gap,
            ])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toy_two_player, ValueTable};
    use crate::testkit::random_shared_model;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    fn toy_transition(s: usize, ja: usize, jb: usize, sp: usize, r: f64) -> Transition {
        Transition {
            state: s,
            joint_agent_action: ja,
            joint_adversary_action: jb,
            reward: r,
            next_state: sp,
        }
    }

    #[test]
    fn zero_rate_leaves_q_unchanged() {
        let model = build_toy_two_player(0.99);
        let mut learner =
            RmaqLearner::new(&model, LrSchedule::Constant { base: 0.0 }, 1e-7).unwrap();
        let before = learner.q.clone();
        rmaq_update(&mut learner, &model, &toy_transition(0, 3, 0, 1, 1.0)).unwrap();
        assert_eq!(learner.q.q, before.q);
        assert_eq!(learner.visit_counts[[0, 3, 0]], 1);
    }

    #[test]
    fn unit_rate_zero_gamma_copies_reward() {
        let model = build_toy_two_player(0.0);
        let mut learner =
            RmaqLearner::new(&model, LrSchedule::Constant { base: 1.0 }, 1e-7).unwrap();
        rmaq_update(&mut learner, &model, &toy_transition(0, 3, 0, 1, 1.0)).unwrap();
        assert_abs_diff_eq!(learner.q.q[[0, 0, 3, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(learner.q.q[[1, 0, 3, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn off_triple_entries_are_bit_identical() {
        let model = build_toy_two_player(0.9);
        let mut learner =
            RmaqLearner::new(&model, LrSchedule::Constant { base: 0.5 }, 1e-7).unwrap();
        // seed some structure first
        for (ja, jb) in [(0, 1), (2, 3), (1, 1)] {
            rmaq_update(&mut learner, &model, &toy_transition(1, ja, jb, 0, 1.0)).unwrap();
        }
        let before = learner.q.clone();
        rmaq_update(&mut learner, &model, &toy_transition(0, 2, 1, 1, 0.0)).unwrap();
        for i in 0..2 {
            for s in 0..2 {
                for ja in 0..4 {
                    for jb in 0..4 {
                        if (s, ja, jb) == (0, 2, 1) {
                            continue;
                        }
                        let (a, b) = (learner.q.q[[i, s, ja, jb]], before.q[[i, s, ja, jb]]);
                        assert!(a.to_bits() == b.to_bits(), "entry ({i},{s},{ja},{jb}) moved");
                    }
                }
            }
        }
    }

    #[test]
    fn harmonic_schedule_decays_per_visit() {
        let sched = LrSchedule::PerVisitHarmonic { base: 0.8 };
        assert_abs_diff_eq!(sched.rate(0), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(sched.rate(3), 0.2, epsilon = 1e-15);
        // square-summability tail check
        let sum_sq: f64 = (0..100_000).map(|t| sched.rate(t).powi(2)).sum();
        assert!(sum_sq < 0.8 * 0.8 * 1.65);
    }

    #[test]
    fn zero_episodes_keeps_zero_tables() {
        let model = build_toy_two_player(0.99);
        let (learner, curve) =
            train_rmaq(&model, LrSchedule::Constant { base: 0.1 }, 0, 25, 1e-6, 7, None).unwrap();
        assert!(curve.is_empty());
        assert!(learner.q.q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let model = build_toy_two_player(0.9);
        let run = |seed| {
            train_rmaq(&model, LrSchedule::Constant { base: 0.1 }, 4, 10, 1e-6, seed, None)
                .unwrap()
                .0
        };
        let (a, b) = (run(11), run(11));
        assert_eq!(a.q.q, b.q.q);
        assert_eq!(a.visit_counts, b.visit_counts);
    }

    #[test]
    fn greedy_policy_on_zero_tables_is_unexploitable() {
        let model = build_toy_two_player(0.99);
        let mut learner =
            RmaqLearner::new(&model, LrSchedule::Constant { base: 0.1 }, 1e-6).unwrap();
        let (policy, report) = greedy_policy_from_q(&mut learner, &model).unwrap();
        assert!(report.exploitability <= 1e-5);
        policy.validate().unwrap();
    }

    #[test]
    fn greedy_policy_at_exact_fixed_point() {
        let model = build_toy_two_player(0.99);
        let v = ValueTable::shared(2, &Array1::from_elem(2, 50.0));
        let mut learner =
            RmaqLearner::new(&model, LrSchedule::Constant { base: 0.1 }, 1e-7).unwrap();
        learner.q = planning::q_from_values(&model, &v);
        learner.version += 1;
        let (policy, report) = greedy_policy_from_q(&mut learner, &model).unwrap();
        assert!(report.exploitability <= 1e-5);
        assert_abs_diff_eq!(report.game_value, 50.0, epsilon = 1e-4);
        // the symmetric equilibrium: every conditional near one half
        for table in policy.agents.iter().chain(&policy.adversaries) {
            for &p in table.iter() {
                assert_abs_diff_eq!(p, 0.5, epsilon = 0.05);
            }
        }
    }

    #[test]
    fn stage_value_cache_tracks_writes() {
        let model = build_toy_two_player(0.0);
        let mut learner =
            RmaqLearner::new(&model, LrSchedule::Constant { base: 1.0 }, 1e-7).unwrap();
        let zero_values = learner.stage_values(&model).unwrap().to_vec();
        assert!(zero_values.iter().all(|&v| v.abs() <= 1e-9));
        // raise every s0 entry to one; the minimizer has nowhere to hide
        for ja in 0..4 {
            for jb in 0..4 {
                rmaq_update(&mut learner, &model, &toy_transition(0, ja, jb, 1, 1.0)).unwrap();
            }
        }
        let after = learner.stage_values(&model).unwrap().to_vec();
        assert_abs_diff_eq!(after[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(after[1], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn short_training_moves_toward_fixed_point_on_random_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = random_shared_model(&mut rng, 2, 2, 0.5);
        let plan = planning::value_iteration(&model, 1e-8, 10_000).unwrap();
        let q_star = planning::q_from_values(&model, &plan.v_star);
        let (_, curve) = train_rmaq(
            &model,
            LrSchedule::Constant { base: 0.2 },
            40,
            25,
            1e-6,
            3,
            Some(&q_star),
        )
        .unwrap();
        let first = curve.first().unwrap().q_gap.unwrap();
        let last = curve.last().unwrap().q_gap.unwrap();
        assert!(last < first, "gap did not shrink: {first} -> {last}");
    }

    #[test]
    fn curve_csv_round_trips_columns() {
        let curve = vec![
            CurvePoint { episode: 1, discounted_return: 0.25, q_gap: Some(49.5) },
            CurvePoint { episode: 2, discounted_return: 0.5, q_gap: None },
        ];
        let text = curve_to_csv(&curve).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("episode,discounted_return,q_gap"));
        assert_eq!(lines.next(), Some("1,0.25,49.5"));
        assert_eq!(lines.next(), Some("2,0.5,"));
    }

    #[test]
    fn rejects_out_of_range_transition() {
        let model = build_toy_two_player(0.9);
        let mut learner =
            RmaqLearner::new(&model, LrSchedule::Constant { base: 0.1 }, 1e-6).unwrap();
        let err = rmaq_update(&mut learner, &model, &toy_transition(0, 9, 0, 0, 0.0));
        assert!(err.is_err());
    }
}
