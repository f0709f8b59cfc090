//! Random small game instances, used by tests and benchmarks.

use crate::model::{Metric, MgSpaModel, PerturbFn, PerturbKind};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;

/// Random shared-reward two-agent MG-SPA with `|S| <= max_states` and
/// per-agent action sets of size `<= max_actions`, table-permutation
/// perturbation, rewards in [-1, 1].
pub fn random_shared_model<R: Rng + ?Sized>(
    rng: &mut R,
    max_states: usize,
    max_actions: usize,
    gamma: f64,
) -> MgSpaModel {
    let num_agents = 2;
    let num_states = rng.gen_range(1..=max_states);
    let agent_actions: Vec<usize> =
        (0..num_agents).map(|_| rng.gen_range(1..=max_actions)).collect();
    // injectivity of f(s, .) needs |B| <= |S|
    let adversary_actions: Vec<usize> = (0..num_agents)
        .map(|_| rng.gen_range(1..=max_actions.min(num_states)))
        .collect();
    let ja: usize = agent_actions.iter().product();
    let jb: usize = adversary_actions.iter().product();

    let mut transition = Array4::zeros((num_states, ja, jb, num_states));
    let mut rewards = Array4::zeros((num_agents, num_states, ja, jb));
    for s in 0..num_states {
        for a in 0..ja {
            for b in 0..jb {
                let mut row: Vec<f64> = (0..num_states).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p /= sum;
                }
                // force exact stochasticity
                let correction: f64 = 1.0 - row.iter().sum::<f64>();
                row[0] += correction;
                for (s2, &p) in row.iter().enumerate() {
                    transition[[s, a, b, s2]] = p;
                }
                let r = rng.gen_range(-1.0..1.0);
                for i in 0..num_agents {
                    rewards[[i, s, a, b]] = r;
                }
            }
        }
    }

    // per-adversary random injections B -> S for each state; all adversaries
    // share action-set sizes per construction above but get their own tables
    let tables: Vec<Vec<Vec<usize>>> = adversary_actions
        .iter()
        .map(|&nb| {
            (0..num_states)
                .map(|_| {
                    let mut states: Vec<usize> = (0..num_states).collect();
                    states.shuffle(rng);
                    states.truncate(nb);
                    states
                })
                .collect()
        })
        .collect();
    let perturb = PerturbFn {
        kind: PerturbKind::TablePermutation { table: tables[0].clone() },
        per_agent: Some(
            tables
                .into_iter()
                .map(|table| PerturbKind::TablePermutation { table })
                .collect(),
        ),
    };

    MgSpaModel::new(
        num_agents,
        num_states,
        agent_actions,
        adversary_actions,
        transition,
        rewards,
        perturb,
        gamma,
        1.0,
        Metric::LInf,
    )
    .expect("random model construction")
}
