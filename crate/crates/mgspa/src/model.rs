//! The Markov game with state perturbation adversaries: game tuple,
//! perturbation machinery, and the two-player toy game.

use crate::error::{Error, Result};
use crate::index;
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

const ROW_SUM_TOL: f64 = 1e-12;

/// Norm used for the perturbation ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    LInf,
    L2,
}

/// One perturbation rule. `TablePermutation` is the tabular path; the
/// additive kinds act on continuous state vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PerturbKind {
    /// `table[s][b]` is the perturbed state; for each `s` the map `b -> table[s][b]`
    /// must be injective.
    TablePermutation { table: Vec<Vec<usize>> },
    /// `s + b`, projected to the ball.
    LinearAdditive,
    /// `s + Gaussian(b, sigma^2 I)`, projected to the ball.
    GaussianAdditive { sigma: f64 },
    /// `s + Uniform(-eps, eps)` per dimension.
    Uniform,
    /// `s + Laplace(b, sigma)`, projected to the ball.
    LaplaceAdditive { sigma: f64 },
    /// `s + Gaussian(0, 1)`; this family is defined without a ball
    /// projection, so none is applied here.
    FixedGaussian,
    /// Same form as `GaussianAdditive` but driven by a non-optimal adversary
    /// checkpoint; the perturbation math is identical.
    NonoptimalGaussian { sigma: f64 },
}

/// Perturbation function with an optional per-agent override list
/// (heterogeneous adversaries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbFn {
    pub kind: PerturbKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_agent: Option<Vec<PerturbKind>>,
}

impl PerturbFn {
    pub fn new(kind: PerturbKind) -> Self {
        PerturbFn { kind, per_agent: None }
    }

    pub fn kind_for(&self, agent: usize) -> &PerturbKind {
        match &self.per_agent {
            Some(list) if agent < list.len() => &list[agent],
            _ => &self.kind,
        }
    }

    /// Tabular perturbation: `f(s, b)` for a single adversary.
    pub fn apply_discrete(&self, agent: usize, s: usize, b: usize) -> Result<usize> {
        match self.kind_for(agent) {
            PerturbKind::TablePermutation { table } => table
                .get(s)
                .and_then(|row| row.get(b))
                .copied()
                .ok_or_else(|| Error::Config(format!("perturbation table has no entry ({s},{b})"))),
            other => Err(Error::Config(format!(
                "discrete perturbation requires table-permutation, got {other:?}"
            ))),
        }
    }

    /// Inverse of the tabular perturbation at fixed `s`: the `b` with
    /// `f(s, b) = s_tilde`.
    pub fn invert_discrete(&self, agent: usize, s: usize, s_tilde: usize) -> Result<usize> {
        match self.kind_for(agent) {
            PerturbKind::TablePermutation { table } => {
                let row = table
                    .get(s)
                    .ok_or_else(|| Error::Config(format!("perturbation table has no state {s}")))?;
                row.iter()
                    .position(|&out| out == s_tilde)
                    .ok_or_else(|| Error::Config(format!("{s_tilde} not in image of f({s}, .)")))
            }
            other => Err(Error::Config(format!(
                "discrete perturbation requires table-permutation, got {other:?}"
            ))),
        }
    }

    /// Continuous perturbation of a state vector, projected into the
    /// `eps`-ball around `s` (except `FixedGaussian`, defined without one).
    pub fn apply_continuous<R: Rng + ?Sized>(
        &self,
        agent: usize,
        s: &[f64],
        b: &[f64],
        eps: f64,
        metric: Metric,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let raw: Vec<f64> = match self.kind_for(agent) {
            PerturbKind::TablePermutation { .. } => {
                return Err(Error::Config(
                    "table-permutation perturbation is not continuous".into(),
                ))
            }
            PerturbKind::LinearAdditive => s.iter().zip(b).map(|(x, d)| x + d).collect(),
            PerturbKind::GaussianAdditive { sigma } | PerturbKind::NonoptimalGaussian { sigma } => {
                let normal = Normal::new(0.0, *sigma).map_err(|e| Error::Config(e.to_string()))?;
                s.iter().zip(b).map(|(x, d)| x + d + normal.sample(rng)).collect()
            }
            PerturbKind::Uniform => {
                if eps == 0.0 {
                    s.to_vec()
                } else {
                    let dist = Uniform::new_inclusive(-eps, eps);
                    s.iter().map(|x| x + dist.sample(rng)).collect()
                }
            }
            PerturbKind::LaplaceAdditive { sigma } => s
                .iter()
                .zip(b)
                .map(|(x, d)| x + d + sample_laplace(rng, *sigma))
                .collect(),
            PerturbKind::FixedGaussian => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                return Ok(s.iter().map(|x| x + normal.sample(rng)).collect());
            }
        };
        Ok(project_to_ball(s, &raw, eps, metric))
    }
}

fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Project `point` into the `eps`-ball around `center`: per-dimension clamp
/// for the sup norm, radial rescale for the Euclidean norm.
pub fn project_to_ball(center: &[f64], point: &[f64], eps: f64, metric: Metric) -> Vec<f64> {
    match metric {
        Metric::LInf => center
            .iter()
            .zip(point)
            .map(|(c, p)| p.clamp(c - eps, c + eps))
            .collect(),
        Metric::L2 => {
            let norm: f64 = center
                .iter()
                .zip(point)
                .map(|(c, p)| (p - c) * (p - c))
                .sum::<f64>()
                .sqrt();
            if norm <= eps {
                point.to_vec()
            } else {
                let scale = eps / norm;
                center
                    .iter()
                    .zip(point)
                    .map(|(c, p)| c + (p - c) * scale)
                    .collect()
            }
        }
    }
}

/// Factorized policies: one stochastic table per agent over perturbed
/// observations, one per adversary over true states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    /// `agents[i][[s_tilde, a]]` = pi^i(a | s_tilde).
    pub agents: Vec<Array2<f64>>,
    /// `adversaries[i][[s, b]]` = rho^i(b | s).
    pub adversaries: Vec<Array2<f64>>,
}

impl JointPolicy {
    pub fn uniform(model: &MgSpaModel) -> Self {
        let agents = model
            .agent_actions
            .iter()
            .map(|&n| Array2::from_elem((model.num_states, n), 1.0 / n as f64))
            .collect();
        let adversaries = model
            .adversary_actions
            .iter()
            .map(|&n| Array2::from_elem((model.num_states, n), 1.0 / n as f64))
            .collect();
        JointPolicy { agents, adversaries }
    }

    pub fn validate(&self) -> Result<()> {
        for table in self.agents.iter().chain(&self.adversaries) {
            for row in table.rows() {
                if row.iter().any(|&p| p < 0.0) {
                    return Err(Error::InvalidModel("negative policy probability".into()));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidModel(format!(
                        "policy row sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-agent state values, `values[[agent, s]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Array2<f64>,
}

impl ValueTable {
    pub fn zeros(num_agents: usize, num_states: usize) -> Self {
        ValueTable { values: Array2::zeros((num_agents, num_states)) }
    }

    /// Same value vector for every agent (shared-reward games).
    pub fn shared(num_agents: usize, v: &Array1<f64>) -> Self {
        let mut values = Array2::zeros((num_agents, v.len()));
        for mut row in values.rows_mut() {
            row.assign(v);
        }
        ValueTable { values }
    }

    pub fn agent(&self, i: usize) -> Array1<f64> {
        self.values.row(i).to_owned()
    }
}

/// Per-agent action values, `q[[agent, s, joint_a, joint_b]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub q: Array4<f64>,
}

impl QTable {
    pub fn zeros(model: &MgSpaModel) -> Self {
        QTable {
            q: Array4::zeros((
                model.num_agents,
                model.num_states,
                model.joint_agent_actions(),
                model.joint_adversary_actions(),
            )),
        }
    }
}

/// The full MG-SPA tuple over finite index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgSpaModel {
    pub num_agents: usize,
    pub num_states: usize,
    /// Per-agent action set sizes.
    pub agent_actions: Vec<usize>,
    /// Per-adversary action set sizes.
    pub adversary_actions: Vec<usize>,
    /// `p(s' | s, joint_a, joint_b)`, indexed `[[s, ja, jb, s']]`.
    pub transition: Array4<f64>,
    /// `r^i(s, joint_a, joint_b)`, indexed `[[agent, s, ja, jb]]`.
    pub rewards: Array4<f64>,
    pub perturb: PerturbFn,
    pub gamma: f64,
    pub epsilon: f64,
    pub metric: Metric,
    /// Reward bound `M = max |r|`, computed at construction.
    pub reward_bound: f64,
}

impl MgSpaModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_agents: usize,
        num_states: usize,
        agent_actions: Vec<usize>,
        adversary_actions: Vec<usize>,
        transition: Array4<f64>,
        rewards: Array4<f64>,
        perturb: PerturbFn,
        gamma: f64,
        epsilon: f64,
        metric: Metric,
    ) -> Result<Self> {
        if num_agents == 0 || num_states == 0 {
            return Err(Error::InvalidModel("empty agent or state set".into()));
        }
        if agent_actions.len() != num_agents || adversary_actions.len() != num_agents {
            return Err(Error::InvalidModel("action set count != num_agents".into()));
        }
        if agent_actions.iter().chain(&adversary_actions).any(|&n| n == 0) {
            return Err(Error::InvalidModel("empty action set".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidModel(format!("gamma {gamma} outside [0, 1)")));
        }
        let ja = index::joint_count(&agent_actions);
        let jb = index::joint_count(&adversary_actions);
        if transition.dim() != (num_states, ja, jb, num_states) {
            return Err(Error::Shape(format!(
                "transition tensor has shape {:?}",
                transition.dim()
            )));
        }
        if rewards.dim() != (num_agents, num_states, ja, jb) {
            return Err(Error::Shape(format!("reward tensor has shape {:?}", rewards.dim())));
        }
        for s in 0..num_states {
            for a in 0..ja {
                for b in 0..jb {
                    let row = transition.slice(ndarray::s![s, a, b, ..]);
                    if row.iter().any(|&p| p < 0.0) {
                        return Err(Error::InvalidModel(format!(
                            "negative transition probability at ({s},{a},{b})"
                        )));
                    }
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::InvalidModel(format!(
                            "transition row ({s},{a},{b}) sums to {sum}"
                        )));
                    }
                }
            }
        }
        let reward_bound = rewards.iter().fold(0.0_f64, |m, &r| m.max(r.abs()));
        let model = MgSpaModel {
            num_agents,
            num_states,
            agent_actions,
            adversary_actions,
            transition,
            rewards,
            perturb,
            gamma,
            epsilon,
            metric,
            reward_bound,
        };
        model.check_bijective_perturbation()?;
        Ok(model)
    }

    /// Assumption: for each fixed `s`, `b -> f(s, b)` is injective.
    fn check_bijective_perturbation(&self) -> Result<()> {
        for (agent, &nb) in self.adversary_actions.iter().enumerate() {
            if let PerturbKind::TablePermutation { table } = self.perturb.kind_for(agent) {
                if table.len() != self.num_states {
                    return Err(Error::InvalidModel("perturbation table wrong state count".into()));
                }
                for (s, row) in table.iter().enumerate() {
                    if row.len() != nb {
                        return Err(Error::InvalidModel(format!(
                            "perturbation table row {s} has {} entries, adversary {agent} has {nb} actions",
                            row.len()
                        )));
                    }
                    if row.iter().any(|&out| out >= self.num_states) {
                        return Err(Error::InvalidModel(format!(
                            "perturbation table row {s} maps outside the state set"
                        )));
                    }
                    let mut image = row.clone();
                    image.sort_unstable();
                    image.dedup();
                    if image.len() != nb {
                        return Err(Error::InvalidModel(format!(
                            "f(s={s}, .) is not injective for adversary {agent}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn joint_agent_actions(&self) -> usize {
        index::joint_count(&self.agent_actions)
    }

    pub fn joint_adversary_actions(&self) -> usize {
        index::joint_count(&self.adversary_actions)
    }

    /// Shared-reward check: `r^1 == ... == r^N`.
    pub fn is_shared_reward(&self) -> bool {
        let first = self.rewards.index_axis(ndarray::Axis(0), 0);
        (1..self.num_agents)
            .all(|i| self.rewards.index_axis(ndarray::Axis(0), i) == first)
    }

    /// Perturb the true state into each agent's observation, `s_tilde^i = f(s, b^i)`.
    pub fn perturb_state(&self, s: usize, joint_b: &[usize]) -> Result<Vec<usize>> {
        joint_b
            .iter()
            .enumerate()
            .map(|(i, &b)| self.perturb.apply_discrete(i, s, b))
            .collect()
    }

    /// One interaction step under factorized policies. Adversaries move
    /// first and see `s`; agents act on their perturbed observations.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: usize,
        policy: &JointPolicy,
        rng: &mut R,
    ) -> Result<StepRecord> {
        let joint_b: Vec<usize> = policy
            .adversaries
            .iter()
            .map(|table| sample_row(&table.row(s).to_vec(), rng))
            .collect();
        let observations = self.perturb_state(s, &joint_b)?;
        let joint_a: Vec<usize> = policy
            .agents
            .iter()
            .zip(&observations)
            .map(|(table, &obs)| sample_row(&table.row(obs).to_vec(), rng))
            .collect();
        let ja = index::encode(&self.agent_actions, &joint_a);
        let jb = index::encode(&self.adversary_actions, &joint_b);
        let rewards: Vec<f64> = (0..self.num_agents)
            .map(|i| self.rewards[[i, s, ja, jb]])
            .collect();
        let row = self.transition.slice(ndarray::s![s, ja, jb, ..]).to_vec();
        let next = sample_row(&row, rng);
        Ok(StepRecord { adversary_actions: joint_b, observations, agent_actions: joint_a, rewards, next_state: next })
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub adversary_actions: Vec<usize>,
    pub observations: Vec<usize>,
    pub agent_actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_state: usize,
}

fn sample_row<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
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

/// Discounted return per agent: sum over t of gamma^(t-1) * r_t.
pub fn discounted_return(rewards: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let num_agents = rewards.first().map_or(0, Vec::len);
    let mut out = vec![0.0; num_agents];
    let mut weight = 1.0;
    for step in rewards {
        for (acc, r) in out.iter_mut().zip(step) {
            *acc += weight * r;
        }
        weight *= gamma;
    }
    out
}

/// The two-player game with symmetric states: shared reward 1 when actions
/// match at `s0` or differ at `s1`; the state flips exactly when the reward
/// is earned; each adversary can swap the observed state (`b=1`) or leave it
/// (`b=0`).
pub fn build_toy_two_player(gamma: f64) -> MgSpaModel {
    let agent_actions = vec![2, 2];
    let adversary_actions = vec![2, 2];
    let (ns, ja, jb) = (2, 4, 4);
    let mut transition = Array4::zeros((ns, ja, jb, ns));
    let mut rewards = Array4::zeros((2, ns, ja, jb));
    for s in 0..ns {
        for a in 0..ja {
            let parts = index::decode(&agent_actions, a);
            let matched = parts[0] == parts[1];
            let success = (s == 0 && matched) || (s == 1 && !matched);
            let next = if success { 1 - s } else { s };
            for b in 0..jb {
                transition[[s, a, b, next]] = 1.0;
                let r = if success { 1.0 } else { 0.0 };
                rewards[[0, s, a, b]] = r;
                rewards[[1, s, a, b]] = r;
            }
        }
    }
    // b = 0 keeps the observation, b = 1 swaps it
    let table = vec![vec![0, 1], vec![1, 0]];
    let perturb = PerturbFn::new(PerturbKind::TablePermutation { table });
    MgSpaModel::new(
        2,
        ns,
        agent_actions,
        adversary_actions,
        transition,
        rewards,
        perturb,
        gamma,
        // eps = ||S||: the swap is unrestricted
        1.0,
        Metric::LInf,
    )
    .expect("toy game construction")
}

pub mod serialize {
    //! Model files are plain JSON with the tuple's named fields.
    use super::MgSpaModel;
    use crate::error::Result;
    use std::path::Path;

    pub fn to_string(model: &MgSpaModel) -> Result<String> {
        Ok(serde_json::to_string_pretty(model)?)
    }

    pub fn from_str(text: &str) -> Result<MgSpaModel> {
        let model: MgSpaModel = serde_json::from_str(text)?;
        // re-run construction checks on untrusted input
        MgSpaModel::new(
            model.num_agents,
            model.num_states,
            model.agent_actions.clone(),
            model.adversary_actions.clone(),
            model.transition.clone(),
            model.rewards.clone(),
            model.perturb.clone(),
            model.gamma,
            model.epsilon,
            model.metric,
        )
    }

    pub fn save(model: &MgSpaModel, path: &Path) -> Result<()> {
        std::fs::write(path, to_string(model)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MgSpaModel> {
        from_str(&std::fs::read_to_string(path)?)
    }
}
