//! Markov games with state perturbation adversaries: the game model, exact
//! minimax planning through one-shot stage games, tabular robust Q-learning,
//! a robust actor-critic on hand-rolled networks, desk-scale particle
//! environments with an attack library, and the experiment harness behind
//! the `mgspa` CLI.

pub mod env;
pub mod error;
pub mod harness;
pub mod index;
pub mod model;
pub mod nn;
pub mod planning;
pub mod replay;
pub mod rmaac;
pub mod rmaq;
pub mod simplex;
pub mod stage;
pub mod testkit;

pub use error::{Error, Result};
pub use model::{
    build_toy_two_player, discounted_return, JointPolicy, Metric, MgSpaModel, PerturbFn,
    PerturbKind, QTable, ValueTable,
};
pub use env::{apply_attack, AttackFamily, AttackSpec, EnvState, ParticleEnv};
pub use harness::{
    evaluate_tabular, load_config, robustness_matrix, EvalStats, ExperimentConfig, Overrides,
};
pub use nn::{Adam, Gradients, Mlp, OutputActivation};
pub use planning::{evaluate_policy, q_from_values, value_iteration, PlanningReport};
pub use replay::ReplayBuffer;
pub use rmaac::{train_rmaac, AgentBundle, RmaacConfig};
pub use rmaq::{train_rmaq, LrSchedule, RmaqLearner};
pub use stage::{
    build_stage_game, exploitability, extract_marginals, solve_zero_sum, BehavioralStrategy,
    Method, SolveReport, StageGame,
};
