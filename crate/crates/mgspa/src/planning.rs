//! Minimax Bellman operator and value iteration to its unique fixed point.

use crate::error::{Error, Result};
use crate::model::{JointPolicy, MgSpaModel, ValueTable};
use crate::stage::{self, Method};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningReport {
    pub v_star: ValueTable,
    /// Sup-norm Bellman residual at exit.
    pub residual: f64,
    pub iterations: usize,
    pub equilibrium_policy: JointPolicy,
    /// Exploitability of the final stage-game strategies.
    pub policy_exploitability: f64,
    /// Factorization residual of the extracted marginals.
    pub factorization_residual: f64,
}

/// One application of the operator: `(Lv)(s)` is the equilibrium value of
/// the stage game built on `v`, conditioned on the chance node landing on `s`.
pub fn apply_minimax_operator(model: &MgSpaModel, v: &Array1<f64>) -> Result<Array1<f64>> {
    let vt = ValueTable::shared(model.num_agents, v);
    let game = stage::build_stage_game(model, &vt, None)?;
    let report = stage::solve_zero_sum(&game, 1e-7, Method::NormalFormLp)?;
    Ok(Array1::from_vec(report.per_state_values))
}

/// `||Lv - v||_inf`.
pub fn bellman_residual(model: &MgSpaModel, v: &Array1<f64>) -> Result<f64> {
    let lv = apply_minimax_operator(model, v)?;
    Ok(sup_norm_diff(&lv, v))
}

fn sup_norm_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0_f64, f64::max)
}

/// Iterate `v <- Lv` from `v0 = 0` until the residual drops below `tol`,
/// then attach the equilibrium policy of the final stage game.
pub fn value_iteration(model: &MgSpaModel, tol: f64, max_iters: usize) -> Result<PlanningReport> {
    value_iteration_from(model, Array1::zeros(model.num_states), tol, max_iters)
}

/// Value iteration from a caller-supplied initial vector.
pub fn value_iteration_from(
    model: &MgSpaModel,
    v0: Array1<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<PlanningReport> {
    if model.gamma >= 1.0 {
        return Err(Error::Config("value iteration requires gamma < 1".into()));
    }
    // stage tolerance a decade below so solver noise cannot mask convergence
    let stage_tol = tol / 10.0;
    let mut v = v0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for iter in 1..=max_iters {
        let vt = ValueTable::shared(model.num_agents, &v);
        let game = stage::build_stage_game(model, &vt, None)?;
        let report = stage::solve_zero_sum(&game, stage_tol, Method::NormalFormLp)?;
        let next = Array1::from_vec(report.per_state_values);
        residual = sup_norm_diff(&next, &v);
        v = next;
        iterations = iter;
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(Error::NotConverged { tol, iters: iterations, best: residual });
    }

    // final stage game at the fixed point; the regret path's averaged
    // strategies land on the symmetric equilibrium when several exist
    let vt = ValueTable::shared(model.num_agents, &v);
    let game = stage::build_stage_game(model, &vt, None)?;
    let solved = match stage::solve_zero_sum(&game, stage_tol.max(1e-5), Method::RegretSelfPlay) {
        Ok(report) => report,
        Err(Error::SolveTolerance { .. }) => {
            stage::solve_zero_sum(&game, stage_tol, Method::NormalFormLp)?
        }
        Err(e) => return Err(e),
    };
    let policy_exploitability = solved.exploitability;
    let marginals = stage::extract_marginals(&game, &solved.strategy, model)?;

    Ok(PlanningReport {
        v_star: ValueTable::shared(model.num_agents, &v),
        residual,
        iterations,
        equilibrium_policy: marginals.policy,
        policy_exploitability,
        factorization_residual: marginals.residual,
    })
}

/// Exact policy evaluation of a factorized `(pi, rho)` pair: solves the
/// linear system `v = r_pi + gamma P_pi v` of the induced Markov chain.
pub fn evaluate_policy(model: &MgSpaModel, policy: &JointPolicy) -> Result<ValueTable> {
    policy.validate()?;
    let n = model.num_states;
    let mut p_pi = vec![vec![0.0; n]; n];
    let mut r_pi = vec![vec![0.0; n]; model.num_agents];
    for s in 0..n {
        for jb in 0..model.joint_adversary_actions() {
            let bs = crate::index::decode(&model.adversary_actions, jb);
            let pb: f64 = policy
                .adversaries
                .iter()
                .zip(&bs)
                .map(|(table, &b)| table[[s, b]])
                .product();
            if pb == 0.0 {
                continue;
            }
            let obs = model.perturb_state(s, &bs)?;
            for ja in 0..model.joint_agent_actions() {
                let a_s = crate::index::decode(&model.agent_actions, ja);
                let pa: f64 = policy
                    .agents
                    .iter()
                    .zip(&a_s)
                    .zip(&obs)
                    .map(|((table, &a), &o)| table[[o, a]])
                    .product();
                let w = pb * pa;
                if w == 0.0 {
                    continue;
                }
                for (i, r_row) in r_pi.iter_mut().enumerate() {
                    r_row[s] += w * model.rewards[[i, s, ja, jb]];
                }
                for sp in 0..n {
                    p_pi[s][sp] += w * model.transition[[s, ja, jb, sp]];
                }
            }
        }
    }
    let mut values = ndarray::Array2::zeros((model.num_agents, n));
    for (i, r_row) in r_pi.iter().enumerate() {
        // (I - gamma P) v = r, small dense system
        let mut a = vec![vec![0.0; n + 1]; n];
        for s in 0..n {
            for sp in 0..n {
                a[s][sp] = if s == sp { 1.0 } else { 0.0 } - model.gamma * p_pi[s][sp];
            }
            a[s][n] = r_row[s];
        }
        let v = solve_dense(a)?;
        for (s, &x) in v.iter().enumerate() {
            values[[i, s]] = x;
        }
    }
    Ok(ValueTable { values })
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Config("singular policy-evaluation system".into()));
        }
        a.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let factor = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= factor * a[col][k];
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// Action-value tables at a value function: `q(s,a,b) = r + gamma E[v(s')]`.
pub fn q_from_values(model: &MgSpaModel, v: &ValueTable) -> crate::model::QTable {
    let mut q = crate::model::QTable::zeros(model);
    for i in 0..model.num_agents {
        for s in 0..model.num_states {
            for ja in 0..model.joint_agent_actions() {
                for jb in 0..model.joint_adversary_actions() {
                    let cont: f64 = (0..model.num_states)
                        .map(|sp| model.transition[[s, ja, jb, sp]] * v.values[[i, sp]])
                        .sum();
                    q.q[[i, s, ja, jb]] = model.rewards[[i, s, ja, jb]] + model.gamma * cont;
                }
            }
        }
    }
    q
}
