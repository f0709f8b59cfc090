//! One-shot zero-sum stage game: a chance node draws the true state, the
//! informed perturber (P1, minimizer) picks the joint perturbed observation,
//! the centralized agent team (P2, maximizer) responds seeing only the
//! observation. Solved either exactly by LP or by regret-matching self-play,
//! always with an exploitability certificate.

use crate::error::{Error, Result};
use crate::index;
use crate::model::{JointPolicy, MgSpaModel, PerturbKind, QTable, ValueTable};
use crate::simplex::{LinProg, Rel};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// P1 moves are indexed by joint adversary action; each maps to a joint
/// observation and the information set P2 sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMove {
    /// Joint perturbed observation (one component per agent).
    pub joint_obs: Vec<usize>,
    /// Index into [`StageGame::infosets`].
    pub infoset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageGame {
    pub num_states: usize,
    pub agent_actions: Vec<usize>,
    pub adversary_actions: Vec<usize>,
    /// Root chance distribution over states.
    pub state_weights: Vec<f64>,
    /// `moves[s][jb]`: P1's move when the true state is `s`.
    pub moves: Vec<Vec<StageMove>>,
    /// Distinct joint observations (P2 information sets).
    pub infosets: Vec<Vec<usize>>,
    /// `payoff[s][jb][ja]`: P2's payoff; P1 receives the negation.
    pub payoff: Vec<Vec<Vec<f64>>>,
}

/// Behavioral strategies: `lambda[s]` is P1's distribution over moves at
/// state `s`, `chi[k]` is P2's distribution over joint actions at infoset `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralStrategy {
    pub lambda: Vec<Vec<f64>>,
    pub chi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    NormalFormLp,
    RegretSelfPlay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub strategy: BehavioralStrategy,
    pub game_value: f64,
    /// Sum of both players' best-response gains; zero exactly at an NE.
    pub exploitability: f64,
    pub iterations: usize,
    pub method: Method,
    /// P2's guaranteed value conditioned on each chance outcome (the
    /// per-state operator read-off).
    pub per_state_values: Vec<f64>,
}

impl StageGame {
    pub fn joint_agent_actions(&self) -> usize {
        index::joint_count(&self.agent_actions)
    }

    /// Expected payoff to P2 under a strategy pair.
    pub fn expected_payoff(&self, strat: &BehavioralStrategy) -> f64 {
        let mut total = 0.0;
        for s in 0..self.num_states {
            total += self.state_weights[s] * self.conditional_payoff(strat, s);
        }
        total
    }

    /// Expected payoff to P2 given that chance selected state `s`.
    pub fn conditional_payoff(&self, strat: &BehavioralStrategy, s: usize) -> f64 {
        let mut v = 0.0;
        for (jb, mv) in self.moves[s].iter().enumerate() {
            let p1 = strat.lambda[s][jb];
            if p1 == 0.0 {
                continue;
            }
            let chi = &strat.chi[mv.infoset];
            let payoff = &self.payoff[s][jb];
            v += p1 * chi.iter().zip(payoff).map(|(c, g)| c * g).sum::<f64>();
        }
        v
    }
}

fn infoset_key(infosets: &mut Vec<Vec<usize>>, obs: &[usize]) -> usize {
    if let Some(k) = infosets.iter().position(|key| key == obs) {
        k
    } else {
        infosets.push(obs.to_vec());
        infosets.len() - 1
    }
}

fn check_weights(num_states: usize, state_weights: Option<Vec<f64>>) -> Result<Vec<f64>> {
    let w = state_weights
        .unwrap_or_else(|| vec![1.0 / num_states as f64; num_states]);
    if w.len() != num_states {
        return Err(Error::Shape("state_weights length != num_states".into()));
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config("state_weights must be a distribution".into()));
    }
    Ok(w)
}

/// Build the stage game whose payoff is `r(s,a,b) + gamma * sum_s' p * v(s')`.
/// Requires a shared-reward model with a table-permutation perturbation.
pub fn build_stage_game(
    model: &MgSpaModel,
    v: &ValueTable,
    state_weights: Option<Vec<f64>>,
) -> Result<StageGame> {
    if !model.is_shared_reward() {
        return Err(Error::Config("stage game requires a shared-reward model".into()));
    }
    let v0 = v.agent(0);
    if v0.len() != model.num_states {
        return Err(Error::Shape("value table length != num_states".into()));
    }
    build_stage_with(model, state_weights, |s, ja, jb| {
        let mut g = model.rewards[[0, s, ja, jb]];
        for s2 in 0..model.num_states {
            g += model.gamma * model.transition[[s, ja, jb, s2]] * v0[s2];
        }
        g
    })
}

/// Build the stage game whose payoff is `q(s, a, b)` directly.
pub fn build_stage_game_from_q(
    model: &MgSpaModel,
    q: &QTable,
    state_weights: Option<Vec<f64>>,
) -> Result<StageGame> {
    build_stage_with(model, state_weights, |s, ja, jb| q.q[[0, s, ja, jb]])
}

fn build_stage_with(
    model: &MgSpaModel,
    state_weights: Option<Vec<f64>>,
    payoff_fn: impl Fn(usize, usize, usize) -> f64,
) -> Result<StageGame> {
    for agent in 0..model.num_agents {
        if !matches!(model.perturb.kind_for(agent), PerturbKind::TablePermutation { .. }) {
            return Err(Error::Config(
                "stage game requires a table-permutation perturbation".into(),
            ));
        }
    }
    let weights = check_weights(model.num_states, state_weights)?;
    let ja_count = model.joint_agent_actions();
    let jb_count = model.joint_adversary_actions();
    let mut infosets = Vec::new();
    let mut moves = Vec::with_capacity(model.num_states);
    let mut payoff = Vec::with_capacity(model.num_states);
    for s in 0..model.num_states {
        let mut row_moves = Vec::with_capacity(jb_count);
        let mut row_payoff = Vec::with_capacity(jb_count);
        for jb in 0..jb_count {
            let parts = index::decode(&model.adversary_actions, jb);
            let joint_obs = model.perturb_state(s, &parts)?;
            let infoset = infoset_key(&mut infosets, &joint_obs);
            row_moves.push(StageMove { joint_obs, infoset });
            row_payoff.push((0..ja_count).map(|a| payoff_fn(s, a, jb)).collect());
        }
        moves.push(row_moves);
        payoff.push(row_payoff);
    }
    Ok(StageGame {
        num_states: model.num_states,
        agent_actions: model.agent_actions.clone(),
        adversary_actions: model.adversary_actions.clone(),
        state_weights: weights,
        moves,
        infosets,
        payoff,
    })
}

/// Best-response gains against a strategy pair: non-negative, zero iff NE.
pub fn exploitability(game: &StageGame, strat: &BehavioralStrategy) -> f64 {
    let u = game.expected_payoff(strat);
    (p2_best_response_value(game, &strat.lambda) - u)
        + (u - p1_best_response_value(game, &strat.chi))
}

/// max over chi' of u(lambda, chi'): per infoset pick the payoff-maximizing
/// joint action under the reach-weighted posterior.
fn p2_best_response_value(game: &StageGame, lambda: &[Vec<f64>]) -> f64 {
    let ja_count = game.joint_agent_actions();
    let mut value = 0.0;
    for k in 0..game.infosets.len() {
        let mut best = f64::NEG_INFINITY;
        for a in 0..ja_count {
            let mut util = 0.0;
            for s in 0..game.num_states {
                for (jb, mv) in game.moves[s].iter().enumerate() {
                    if mv.infoset == k {
                        util += game.state_weights[s] * lambda[s][jb] * game.payoff[s][jb][a];
                    }
                }
            }
            best = best.max(util);
        }
        if best.is_finite() {
            value += best;
        }
    }
    value
}

/// min over lambda' of u(lambda', chi): per state pick the payoff-minimizing move.
fn p1_best_response_value(game: &StageGame, chi: &[Vec<f64>]) -> f64 {
    let mut value = 0.0;
    for s in 0..game.num_states {
        let mut best = f64::INFINITY;
        for (jb, mv) in game.moves[s].iter().enumerate() {
            let util: f64 = chi[mv.infoset]
                .iter()
                .zip(&game.payoff[s][jb])
                .map(|(c, g)| c * g)
                .sum();
            best = best.min(util);
        }
        value += game.state_weights[s] * best;
    }
    value
}

/// Solve the stage game to within `tol` exploitability.
pub fn solve_zero_sum(game: &StageGame, tol: f64, method: Method) -> Result<SolveReport> {
    let report = match method {
        Method::NormalFormLp => solve_lp(game)?,
        Method::RegretSelfPlay => solve_regret(game, tol, 2_000_000)?,
    };
    if report.exploitability > tol {
        return Err(Error::SolveTolerance {
            exploitability: report.exploitability,
            tol,
            report: Box::new(report),
        });
    }
    Ok(report)
}

/// Best-effort regret self-play under an explicit iteration budget: always
/// returns the averaged strategies with their exploitability certificate,
/// even when `tol` was not reached.
pub fn regret_self_play_capped(
    game: &StageGame,
    tol: f64,
    max_iters: usize,
) -> Result<SolveReport> {
    match solve_regret(game, tol, max_iters) {
        Ok(report) => Ok(report),
        Err(Error::SolveTolerance { report, .. }) => Ok(*report),
        Err(e) => Err(e),
    }
}

/// Exact solve via the pair of behavioral-strategy LPs (equivalent to the
/// normal-form LP by realization equivalence on this one-move tree), plus an
/// egalitarian refinement of the per-state values: among P2's optimal
/// strategies the minimum conditional value is maximized, which pins down
/// the symmetric solution on tie-degenerate games.
fn solve_lp(game: &StageGame) -> Result<SolveReport> {
    let ja_count = game.joint_agent_actions();
    let num_infosets = game.infosets.len();
    let num_states = game.num_states;

    // ---- P2 LP: variables [chi[k][a] ...; u_s ...] maximize sum w_s u_s
    let chi_vars = num_infosets * ja_count;
    let n2 = chi_vars + num_states;
    let chi_at = |k: usize, a: usize| k * ja_count + a;
    let u_at = |s: usize| chi_vars + s;

    let mut obj = vec![0.0; n2];
    for s in 0..num_states {
        obj[u_at(s)] = -game.state_weights[s];
    }
    let base_rows = p2_feasibility_rows(game, n2, chi_at, u_at);
    let mut lp = LinProg::minimize(obj.clone());
    for s in 0..num_states {
        lp.mark_free(u_at(s));
    }
    for (coeffs, rel, rhs) in &base_rows {
        lp.add_row(coeffs.clone(), *rel, *rhs);
    }
    let first = lp.solve()?;
    let game_value = -first.value;

    // ---- refinement: maximize z with z <= u_s on the optimal face
    let nr = n2 + 1;
    let z_at = n2;
    let mut obj = vec![0.0; nr];
    obj[z_at] = -1.0;
    let mut lp = LinProg::minimize(obj);
    for s in 0..num_states {
        lp.mark_free(u_at(s));
    }
    lp.mark_free(z_at);
    for (coeffs, rel, rhs) in &base_rows {
        let mut c = coeffs.clone();
        c.push(0.0);
        lp.add_row(c, *rel, *rhs);
    }
    let mut opt_row = vec![0.0; nr];
    for s in 0..num_states {
        opt_row[u_at(s)] = game.state_weights[s];
    }
    lp.add_row(opt_row, Rel::Ge, game_value);
    for s in 0..num_states {
        let mut c = vec![0.0; nr];
        c[u_at(s)] = 1.0;
        c[z_at] = -1.0;
        lp.add_row(c, Rel::Ge, 0.0);
    }
    // a degenerate game can push the refinement outside feasibility
    // tolerances; the unrefined optimum is still a valid equilibrium
    let solution = match lp.solve() {
        Ok(refined) => refined,
        Err(_) => first,
    };
    let mut chi = vec![vec![0.0; ja_count]; num_infosets];
    for k in 0..num_infosets {
        for a in 0..ja_count {
            chi[k][a] = solution.x[chi_at(k, a)].max(0.0);
        }
        let sum: f64 = chi[k].iter().sum();
        for c in chi[k].iter_mut() {
            *c /= sum;
        }
    }
    let per_state_values: Vec<f64> = (0..num_states).map(|s| solution.x[u_at(s)]).collect();

    // ---- P1 LP: variables [lambda[s][jb] ...; t_k ...] minimize sum t_k
    let lambda_counts: Vec<usize> = game.moves.iter().map(Vec::len).collect();
    let lambda_offsets: Vec<usize> = lambda_counts
        .iter()
        .scan(0, |acc, &n| {
            let off = *acc;
            *acc += n;
            Some(off)
        })
        .collect();
    let lambda_vars: usize = lambda_counts.iter().sum();
    let n1 = lambda_vars + num_infosets;
    let lam_at = |s: usize, jb: usize| lambda_offsets[s] + jb;
    let t_at = |k: usize| lambda_vars + k;

    let mut obj = vec![0.0; n1];
    for k in 0..num_infosets {
        obj[t_at(k)] = 1.0;
    }
    let mut lp = LinProg::minimize(obj);
    for k in 0..num_infosets {
        lp.mark_free(t_at(k));
    }
    for k in 0..num_infosets {
        for a in 0..ja_count {
            let mut coeffs = vec![0.0; n1];
            coeffs[t_at(k)] = 1.0;
            for s in 0..num_states {
                for (jb, mv) in game.moves[s].iter().enumerate() {
                    if mv.infoset == k {
                        coeffs[lam_at(s, jb)] -=
                            game.state_weights[s] * game.payoff[s][jb][a];
                    }
                }
            }
            lp.add_row(coeffs, Rel::Ge, 0.0);
        }
    }
    for s in 0..num_states {
        let mut coeffs = vec![0.0; n1];
        for jb in 0..lambda_counts[s] {
            coeffs[lam_at(s, jb)] = 1.0;
        }
        lp.add_row(coeffs, Rel::Eq, 1.0);
    }
    let sol1 = lp.solve()?;
    let mut lambda = vec![Vec::new(); num_states];
    for s in 0..num_states {
        let mut row: Vec<f64> = (0..lambda_counts[s])
            .map(|jb| sol1.x[lam_at(s, jb)].max(0.0))
            .collect();
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= sum;
        }
        lambda[s] = row;
    }

    let strategy = BehavioralStrategy { lambda, chi };
    let expl = exploitability(game, &strategy);
    Ok(SolveReport {
        strategy,
        game_value,
        exploitability: expl,
        iterations: 1,
        method: Method::NormalFormLp,
        per_state_values,
    })
}

type RowBuild = (Vec<f64>, Rel, f64);

fn p2_feasibility_rows(
    game: &StageGame,
    n: usize,
    chi_at: impl Fn(usize, usize) -> usize,
    u_at: impl Fn(usize) -> usize,
) -> Vec<RowBuild> {
    let ja_count = game.joint_agent_actions();
    let mut rows = Vec::new();
    // u_s <= payoff of every P1 move against chi
    for s in 0..game.num_states {
        for (jb, mv) in game.moves[s].iter().enumerate() {
            let mut coeffs = vec![0.0; n];
            for a in 0..ja_count {
                coeffs[chi_at(mv.infoset, a)] = game.payoff[s][jb][a];
            }
            coeffs[u_at(s)] = -1.0;
            rows.push((coeffs, Rel::Ge, 0.0));
        }
    }
    for k in 0..game.infosets.len() {
        let mut coeffs = vec![0.0; n];
        for a in 0..ja_count {
            coeffs[chi_at(k, a)] = 1.0;
        }
        rows.push((coeffs, Rel::Eq, 1.0));
    }
    rows
}

/// Regret-matching self-play; returns reach-weighted time-averaged
/// strategies once their exploitability audit passes.
fn solve_regret(game: &StageGame, tol: f64, max_iters: usize) -> Result<SolveReport> {
    let ja_count = game.joint_agent_actions();
    let num_infosets = game.infosets.len();
    let num_states = game.num_states;
    let lambda_counts: Vec<usize> = game.moves.iter().map(Vec::len).collect();

    let mut regret1: Vec<Vec<f64>> = lambda_counts.iter().map(|&n| vec![0.0; n]).collect();
    let mut regret2 = vec![vec![0.0; ja_count]; num_infosets];
    let mut sum1: Vec<Vec<f64>> = lambda_counts.iter().map(|&n| vec![0.0; n]).collect();
    let mut sum2 = vec![vec![0.0; ja_count]; num_infosets];

    let check_every = 128;
    let mut best: Option<SolveReport> = None;
    for iter in 1..=max_iters {
        let lambda: Vec<Vec<f64>> = regret1.iter().map(|r| regret_match(r)).collect();
        let chi: Vec<Vec<f64>> = regret2.iter().map(|r| regret_match(r)).collect();

        // P2 counterfactual utilities per infoset
        let mut util2 = vec![vec![0.0; ja_count]; num_infosets];
        for s in 0..num_states {
            for (jb, mv) in game.moves[s].iter().enumerate() {
                let reach = game.state_weights[s] * lambda[s][jb];
                if reach == 0.0 {
                    continue;
                }
                for a in 0..ja_count {
                    util2[mv.infoset][a] += reach * game.payoff[s][jb][a];
                }
            }
        }
        for k in 0..num_infosets {
            let baseline: f64 = chi[k].iter().zip(&util2[k]).map(|(c, u)| c * u).sum();
            for a in 0..ja_count {
                regret2[k][a] += util2[k][a] - baseline;
            }
        }
        // P1 counterfactual utilities per state (P1 minimizes the payoff)
        for s in 0..num_states {
            let w = game.state_weights[s];
            let util1: Vec<f64> = game.moves[s]
                .iter()
                .enumerate()
                .map(|(jb, mv)| {
                    -w * chi[mv.infoset]
                        .iter()
                        .zip(&game.payoff[s][jb])
                        .map(|(c, g)| c * g)
                        .sum::<f64>()
                })
                .collect();
            let baseline: f64 = lambda[s].iter().zip(&util1).map(|(l, u)| l * u).sum();
            for jb in 0..lambda_counts[s] {
                regret1[s][jb] += util1[jb] - baseline;
            }
        }
        // time-averaged strategies; each player's behavioral strategy is
        // averaged under its own reach, which is 1 for every infoset here
        for s in 0..num_states {
            for jb in 0..lambda_counts[s] {
                sum1[s][jb] += lambda[s][jb];
            }
        }
        for k in 0..num_infosets {
            for a in 0..ja_count {
                sum2[k][a] += chi[k][a];
            }
        }

        if iter % check_every == 0 || iter == max_iters {
            let strategy = BehavioralStrategy {
                lambda: sum1.iter().map(|r| normalize(r)).collect(),
                chi: sum2.iter().map(|r| normalize(r)).collect(),
            };
            let expl = exploitability(game, &strategy);
            let value = game.expected_payoff(&strategy);
            let per_state: Vec<f64> = (0..num_states)
                .map(|s| game.conditional_payoff(&strategy, s))
                .collect();
            let report = SolveReport {
                strategy,
                game_value: value,
                exploitability: expl,
                iterations: iter,
                method: Method::RegretSelfPlay,
                per_state_values: per_state,
            };
            if expl <= tol {
                return Ok(report);
            }
            if best.as_ref().map_or(true, |b| expl < b.exploitability) {
                best = Some(report);
            }
        }
    }
    let report = best.expect("at least one exploitability audit ran");
    Err(Error::SolveTolerance {
        exploitability: report.exploitability,
        tol,
        report: Box::new(report),
    })
}

fn regret_match(regrets: &[f64]) -> Vec<f64> {
    let positive: Vec<f64> = regrets.iter().map(|&r| r.max(0.0)).collect();
    let total: f64 = positive.iter().sum();
    if total > 0.0 {
        positive.iter().map(|&r| r / total).collect()
    } else {
        vec![1.0 / regrets.len() as f64; regrets.len()]
    }
}

fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|&w| w / total).collect()
    } else {
        vec![1.0 / weights.len() as f64; weights.len()]
    }
}

/// Product-form stage solution: per-agent and per-adversary tables with a
/// unilateral-deviation certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductReport {
    pub policy: JointPolicy,
    /// Team payoff at the profile.
    pub value: f64,
    /// Largest unilateral best-response gain across all agents and
    /// adversaries; zero exactly at a product-form equilibrium.
    pub exploitability: f64,
    pub iterations: usize,
}

/// Per-state conditional team payoffs and the linear coefficients of the
/// weighted payoff in each player's own table, at a product profile under
/// the given state weights. The payoff is linear in any single table, so
/// the coefficients double as counterfactual action values for regret
/// matching and as best-response utilities. Returns `(per-state values,
/// agent grads, adversary grads)`.
fn product_gradients(
    game: &StageGame,
    model: &MgSpaModel,
    policy: &JointPolicy,
    weights: &[f64],
) -> (Vec<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let n = model.num_agents;
    let ja_count = game.joint_agent_actions();
    let decoded_a: Vec<Vec<usize>> = (0..ja_count)
        .map(|ja| index::decode(&model.agent_actions, ja))
        .collect();
    let mut per_state = vec![0.0; game.num_states];
    let mut g_agents: Vec<Array2<f64>> = model
        .agent_actions
        .iter()
        .map(|&na| Array2::zeros((model.num_states, na)))
        .collect();
    let mut g_advs: Vec<Array2<f64>> = model
        .adversary_actions
        .iter()
        .map(|&nb| Array2::zeros((model.num_states, nb)))
        .collect();
    for s in 0..game.num_states {
        let w = weights[s];
        for (jb, mv) in game.moves[s].iter().enumerate() {
            let bs = index::decode(&model.adversary_actions, jb);
            let pb_parts: Vec<f64> =
                (0..n).map(|k| policy.adversaries[k][[s, bs[k]]]).collect();
            let obs = &mv.joint_obs;
            for (ja, g) in game.payoff[s][jb].iter().enumerate() {
                let a_s = &decoded_a[ja];
                let pa_parts: Vec<f64> =
                    (0..n).map(|k| policy.agents[k][[obs[k], a_s[k]]]).collect();
                let pb: f64 = pb_parts.iter().product();
                let pa: f64 = pa_parts.iter().product();
                per_state[s] += pb * pa * g;
                if w == 0.0 {
                    continue;
                }
                for k in 0..n {
                    let loo_a: f64 = pa_parts
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != k)
                        .map(|(_, &p)| p)
                        .product();
                    g_agents[k][[obs[k], a_s[k]]] += w * pb * loo_a * g;
                    let loo_b: f64 = pb_parts
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != k)
                        .map(|(_, &p)| p)
                        .product();
                    g_advs[k][[s, bs[k]]] += w * loo_b * pa * g;
                }
            }
        }
    }
    (per_state, g_agents, g_advs)
}

/// Largest unilateral best-response gain at a product profile in the
/// egalitarian game: agents maximize and adversaries minimize the weighted
/// team payoff, and a virtual state picker adversarially reweights states
/// by their shortfall against `targets` (the per-state stage values the
/// team must defend). With `targets = None` the picker is absent and the
/// chance weights are used as-is. Returns `(weighted value, gain)`.
pub fn product_exploitability(
    game: &StageGame,
    model: &MgSpaModel,
    policy: &JointPolicy,
    targets: Option<&[f64]>,
    weights: &[f64],
) -> (f64, f64) {
    let (per_state, g_agents, g_advs) =
        product_gradients(game, model, policy, weights);
    let value: f64 = per_state.iter().zip(weights).map(|(u, w)| u * w).sum();
    let mut gain = 0.0_f64;
    for g in &g_agents {
        let br: f64 = g
            .rows()
            .into_iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .sum();
        gain = gain.max(br - value);
    }
    for g in &g_advs {
        let br: f64 = g
            .rows()
            .into_iter()
            .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
            .sum();
        gain = gain.max(value - br);
    }
    if let Some(targets) = targets {
        // the picker moves all weight to the state with the largest
        // shortfall relative to its target
        let current: f64 = per_state
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((u, t), w)| w * (u - t))
            .sum();
        let worst = per_state
            .iter()
            .zip(targets)
            .map(|(u, t)| u - t)
            .fold(f64::INFINITY, f64::min);
        gain = gain.max(current - worst);
    }
    (value, gain)
}

/// Product-form equilibrium search by simultaneous per-player regret
/// matching with linear averaging, starting from the uniform profile. The
/// centralized solvers certify the game value but their strategies may
/// coordinate through the shared infoset; this search works directly over
/// factorized tables, which is the only profile the underlying game can
/// execute. When `state_targets` is given, a virtual minimizing state
/// picker replaces the chance weights, so the team must defend every
/// state's target value rather than just their average — the product
/// analogue of the egalitarian refinement. Returns the averaged profile
/// with the best certificate seen.
pub fn solve_product(
    game: &StageGame,
    model: &MgSpaModel,
    state_targets: Option<&[f64]>,
    tol: f64,
    max_iters: usize,
) -> Result<ProductReport> {
    if let Some(t) = state_targets {
        if t.len() != game.num_states {
            return Err(Error::Shape("state_targets length != num_states".into()));
        }
    }
    let n = model.num_agents;
    let mut current = JointPolicy::uniform(model);
    let mut picker = vec![1.0 / game.num_states as f64; game.num_states];
    let zeros = |sizes: &[usize]| -> Vec<Array2<f64>> {
        sizes
            .iter()
            .map(|&m| Array2::zeros((model.num_states, m)))
            .collect()
    };
    let mut regret_agents = zeros(&model.agent_actions);
    let mut regret_advs = zeros(&model.adversary_actions);
    let mut regret_picker = vec![0.0; game.num_states];
    let mut sum_agents = zeros(&model.agent_actions);
    let mut sum_advs = zeros(&model.adversary_actions);
    let mut sum_picker = vec![0.0; game.num_states];
    let mut weight_total = 0.0_f64;
    let mut best: Option<ProductReport> = None;
    let check_every = 64;

    fn rm_plus(regret: &mut [f64], utils: &[f64], sign: f64, row: &mut [f64]) {
        let mean: f64 = utils.iter().zip(row.iter()).map(|(u, p)| u * p).sum();
        let mut total = 0.0;
        for (r, &u) in regret.iter_mut().zip(utils) {
            *r = (*r + sign * (u - mean)).max(0.0);
            total += *r;
        }
        if total > 0.0 {
            for (p, &r) in row.iter_mut().zip(regret.iter()) {
                *p = r / total;
            }
        } else {
            row.fill(1.0 / row.len() as f64);
        }
    }

    for t in 1..=max_iters {
        let weights: &[f64] = if state_targets.is_some() {
            &picker
        } else {
            &game.state_weights
        };
        let (per_state, g_agents, g_advs) =
            product_gradients(game, model, &current, weights);
        for k in 0..n {
            for s in 0..model.num_states {
                let utils: Vec<f64> = g_agents[k].row(s).to_vec();
                let mut row = current.agents[k].row_mut(s);
                rm_plus(
                    regret_agents[k].row_mut(s).as_slice_mut().unwrap(),
                    &utils,
                    1.0,
                    row.as_slice_mut().unwrap(),
                );
                let utils: Vec<f64> = g_advs[k].row(s).to_vec();
                let mut row = current.adversaries[k].row_mut(s);
                rm_plus(
                    regret_advs[k].row_mut(s).as_slice_mut().unwrap(),
                    &utils,
                    -1.0,
                    row.as_slice_mut().unwrap(),
                );
            }
        }
        if let Some(targets) = state_targets {
            let utils: Vec<f64> = per_state
                .iter()
                .zip(targets)
                .map(|(u, t)| u - t)
                .collect();
            rm_plus(&mut regret_picker, &utils, -1.0, &mut picker);
        }
        let w = t as f64;
        weight_total += w;
        for k in 0..n {
            sum_agents[k].scaled_add(w, &current.agents[k]);
            sum_advs[k].scaled_add(w, &current.adversaries[k]);
        }
        for (acc, &p) in sum_picker.iter_mut().zip(&picker) {
            *acc += w * p;
        }
        if t % check_every == 0 || t == max_iters {
            let average = JointPolicy {
                agents: sum_agents.iter().map(|m| m / weight_total).collect(),
                adversaries: sum_advs.iter().map(|m| m / weight_total).collect(),
            };
            let avg_weights: Vec<f64> = if state_targets.is_some() {
                sum_picker.iter().map(|&p| p / weight_total).collect()
            } else {
                game.state_weights.clone()
            };
            let (value, gain) = product_exploitability(
                game,
                model,
                &average,
                state_targets,
                &avg_weights,
            );
            let better = best
                .as_ref()
                .map(|b| gain < b.exploitability)
                .unwrap_or(true);
            if better {
                best = Some(ProductReport {
                    policy: average,
                    value,
                    exploitability: gain,
                    iterations: t,
                });
            }
            if best.as_ref().unwrap().exploitability <= tol {
                break;
            }
        }
    }
    Ok(best.expect("at least one certificate checkpoint"))
}

/// Extracted factorized policies plus the factorization residual
/// `max over infosets of ||chi - prod chi^i||_inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalReport {
    pub policy: JointPolicy,
    pub residual: f64,
}

/// Per-agent and per-adversary marginals of the centralized equilibrium.
/// Agent marginals pool infosets by the agent's own observation component,
/// weighted by reach under `lambda` and the chance weights.
pub fn extract_marginals(
    game: &StageGame,
    strat: &BehavioralStrategy,
    model: &MgSpaModel,
) -> Result<MarginalReport> {
    let ja_count = game.joint_agent_actions();
    let num_agents = model.num_agents;

    // adversary marginals from lambda (moves are indexed by joint b)
    let mut adversaries = Vec::with_capacity(num_agents);
    for i in 0..num_agents {
        let nb = model.adversary_actions[i];
        let mut table = Array2::zeros((model.num_states, nb));
        for s in 0..model.num_states {
            for (jb, _) in game.moves[s].iter().enumerate() {
                let parts = index::decode(&model.adversary_actions, jb);
                table[[s, parts[i]]] += strat.lambda[s][jb];
            }
        }
        adversaries.push(table);
    }

    // agent marginals pooled by own observation component
    let mut agents = Vec::with_capacity(num_agents);
    for i in 0..num_agents {
        let na = model.agent_actions[i];
        let mut table = Array2::zeros((model.num_states, na));
        let mut weight = Array1::<f64>::zeros(model.num_states);
        for s in 0..model.num_states {
            for (jb, mv) in game.moves[s].iter().enumerate() {
                let reach = game.state_weights[s] * strat.lambda[s][jb];
                if reach == 0.0 {
                    continue;
                }
                let obs = mv.joint_obs[i];
                weight[obs] += reach;
                let chi = &strat.chi[mv.infoset];
                for ja in 0..ja_count {
                    let parts = index::decode(&model.agent_actions, ja);
                    table[[obs, parts[i]]] += reach * chi[ja];
                }
            }
        }
        for obs in 0..model.num_states {
            if weight[obs] > 0.0 {
                for a in 0..na {
                    table[[obs, a]] /= weight[obs];
                }
            } else {
                for a in 0..na {
                    table[[obs, a]] = 1.0 / na as f64;
                }
            }
        }
        agents.push(table);
    }

    // factorization residual, per infoset
    let mut residual = 0.0_f64;
    for chi in &strat.chi {
        residual = residual.max(factorization_residual(chi, &model.agent_actions));
    }
    for s in 0..model.num_states {
        residual = residual.max(factorization_residual(
            &strat.lambda[s],
            &model.adversary_actions,
        ));
    }

    let policy = JointPolicy { agents, adversaries };
    policy.validate()?;
    Ok(MarginalReport { policy, residual })
}

/// `||joint - prod of its own marginals||_inf` over a joint distribution on
/// a product action space.
pub fn factorization_residual(joint: &[f64], sizes: &[usize]) -> f64 {
    let mut marginals: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for (idx, &p) in joint.iter().enumerate() {
        let parts = index::decode(sizes, idx);
        for (i, &part) in parts.iter().enumerate() {
            marginals[i][part] += p;
        }
    }
    let mut residual = 0.0_f64;
    for (idx, &p) in joint.iter().enumerate() {
        let parts = index::decode(sizes, idx);
        let product: f64 = parts
            .iter()
            .enumerate()
            .map(|(i, &part)| marginals[i][part])
            .product();
        residual = residual.max((p - product).abs());
    }
    residual
}

pub mod serialize {
    //! Stage games and solve reports as JSON, for `solve-stage` debugging.
    use super::{SolveReport, StageGame};
    use crate::error::Result;
    use std::path::Path;

    pub fn game_to_string(game: &StageGame) -> Result<String> {
        Ok(serde_json::to_string_pretty(game)?)
    }

    pub fn game_from_str(text: &str) -> Result<StageGame> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load_game(path: &Path) -> Result<StageGame> {
        game_from_str(&std::fs::read_to_string(path)?)
    }

    pub fn save_game(game: &StageGame, path: &Path) -> Result<()> {
        std::fs::write(path, game_to_string(game)?)?;
        Ok(())
    }

    pub fn report_to_string(report: &SolveReport) -> Result<String> {
        Ok(serde_json::to_string_pretty(report)?)
    }
}
