//! Robust multi-agent actor-critic with deterministic policies: centralized
//! critics over (state, actions, perturbations), decentralized actors on
//! perturbed observations, and trained perturbation adversaries whose
//! update carries the chain-rule correction through the actor.

use crate::env::{self, AttackSpec, ParticleEnv};
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, Mlp, OutputActivation};
use crate::replay::{ReplayBuffer, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Training hyperparameters. Defaults are the desk-scale profile; the
/// reference profile (hidden 64, buffer 1e6, minibatch 1024) is available
/// through configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmaacConfig {
    pub hidden: usize,
    pub actor_lr: f64,
    pub adversary_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub minibatch: usize,
    pub tau: f64,
    pub iteration_steps: usize,
    pub epsilon: f64,
    pub steps_per_episode: usize,
    pub episodes: usize,
    /// Frame-stacking depth h; 1 reproduces the memoryless path.
    pub frame_stack: usize,
    /// Initial exploration-noise scale, decayed linearly to zero.
    pub noise_scale: f64,
    /// Environment steps between update rounds.
    pub update_every: usize,
    /// When false the adversaries stay at zero output and are never
    /// updated — the non-robust baseline.
    pub adversaries_enabled: bool,
}

impl Default for RmaacConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            actor_lr: 0.01,
            adversary_lr: 0.005,
            critic_lr: 0.01,
            gamma: 0.95,
            buffer_capacity: 100_000,
            minibatch: 128,
            tau: 0.01,
            iteration_steps: 20,
            epsilon: 0.5,
            steps_per_episode: 25,
            episodes: 300,
            frame_stack: 1,
            noise_scale: 0.3,
            update_every: 25,
            adversaries_enabled: true,
        }
    }
}

impl RmaacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.frame_stack == 0 {
            return Err(Error::Config("frame_stack must be >= 1".into()));
        }
        if self.minibatch == 0 || self.minibatch > self.buffer_capacity {
            return Err(Error::Config("minibatch must fit the buffer".into()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Live nets, their targets, and per-net optimizers for one agent.
#[derive(Debug, Clone)]
pub struct AgentNets {
    pub critic: Mlp,
    pub actor: Mlp,
    pub adversary: Mlp,
    pub critic_target: Mlp,
    pub actor_target: Mlp,
    pub adversary_target: Mlp,
    critic_opt: Adam,
    actor_opt: Adam,
    adversary_opt: Adam,
}

/// All agents' networks plus the dimensions that fix input layouts.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    pub config: RmaacConfig,
    pub nets: Vec<AgentNets>,
    pub num_agents: usize,
    /// Single-frame observation width (also the perturbation width).
    pub obs_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub action_bound: f64,
}

impl AgentBundle {
    /// Critic input: `[s, a_1..a_N, b_1..b_N]`.
    pub fn critic_input_dim(&self) -> usize {
        self.state_dim + self.num_agents * (self.action_dim + self.obs_dim)
    }

    pub fn new<R: Rng + ?Sized>(
        config: RmaacConfig,
        num_agents: usize,
        obs_dim: usize,
        action_dim: usize,
        state_dim: usize,
        action_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let critic_in = state_dim + num_agents * (action_dim + obs_dim);
        let actor_in = obs_dim * config.frame_stack;
        let mut nets = Vec::with_capacity(num_agents);
        for _ in 0..num_agents {
            let critic = Mlp::new(&[critic_in, h, h, 1], OutputActivation::Linear, rng)?;
            let actor = Mlp::new(
                &[actor_in, h, h, action_dim],
                OutputActivation::Tanh { scale: action_bound },
                rng,
            )?;
            let adversary = if config.adversaries_enabled {
                Mlp::new(
                    &[state_dim, h, h, obs_dim],
                    OutputActivation::Tanh { scale: config.epsilon },
                    rng,
                )?
            } else {
                Mlp::zeros(
                    &[state_dim, h, h, obs_dim],
                    OutputActivation::Tanh { scale: config.epsilon },
                )?
            };
            let (critic_lr, actor_lr, adversary_lr) =
                (config.critic_lr, config.actor_lr, config.adversary_lr);
            nets.push(AgentNets {
                critic_target: critic.clone(),
                actor_target: actor.clone(),
                adversary_target: adversary.clone(),
                critic_opt: Adam::new(&critic, critic_lr),
                actor_opt: Adam::new(&actor, actor_lr),
                adversary_opt: Adam::new(&adversary, adversary_lr),
                critic,
                actor,
                adversary,
            });
        }
        Ok(Self { config, nets, num_agents, obs_dim, action_dim, state_dim, action_bound })
    }

    /// Largest parameter magnitude across every live network.
    pub fn max_abs_param(&self) -> f64 {
        self.nets
            .iter()
            .flat_map(|n| [&n.critic, &n.actor, &n.adversary])
            .map(Mlp::max_abs_param)
            .fold(0.0, f64::max)
    }
}

/// Concatenate the `h` most recent observations, newest first, repeating
/// the earliest entry when the history is shorter than `h`.
pub fn frame_stack(history: &[Vec<f64>], h: usize) -> Result<Vec<f64>> {
    if h == 0 || history.is_empty() {
        return Err(Error::Config("frame stacking needs h >= 1 and a nonempty history".into()));
    }
    let mut out = Vec::with_capacity(h * history[0].len());
    for k in 0..h {
        let idx = k.min(history.len() - 1);
        out.extend_from_slice(&history[idx]);
    }
    Ok(out)
}

fn critic_input(
    bundle: &AgentBundle,
    state: &[f64],
    actions: &[Vec<f64>],
    perturbations: &[Vec<f64>],
) -> Vec<f64> {
    let mut x = Vec::with_capacity(bundle.critic_input_dim());
    x.extend_from_slice(state);
    for a in actions {
        x.extend_from_slice(a);
    }
    for b in perturbations {
        x.extend_from_slice(b);
    }
    x
}

/// Offset of agent `i`'s action slot within the critic input.
fn action_offset(bundle: &AgentBundle, i: usize) -> usize {
    bundle.state_dim + i * bundle.action_dim
}

/// Offset of adversary `i`'s perturbation slot within the critic input.
fn perturbation_offset(bundle: &AgentBundle, i: usize) -> usize {
    bundle.state_dim + bundle.num_agents * bundle.action_dim + i * bundle.obs_dim
}

/// Add `b` to the newest frame of a stacked observation.
fn perturb_stacked(stacked: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = stacked.to_vec();
    for (x, &delta) in out.iter_mut().zip(b) {
        *x += delta;
    }
    out
}

/// Temporal-difference targets `y_k = r_k + gamma * q'(s', a', b')` with
/// every primed quantity from the target networks.
pub fn critic_targets(bundle: &AgentBundle, agent: usize, batch: &[&Transition]) -> Result<Vec<f64>> {
    let nets = &bundle.nets[agent];
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let mut next_b = Vec::with_capacity(bundle.num_agents);
        let mut next_a = Vec::with_capacity(bundle.num_agents);
        for (j, bnets) in bundle.nets.iter().enumerate() {
            let b = if bundle.config.adversaries_enabled {
                bnets.adversary_target.forward(&t.next_state)?
            } else {
                vec![0.0; bundle.obs_dim]
            };
            let s_tilde = perturb_stacked(&t.next_observations[j], &b);
            next_a.push(bnets.actor_target.forward(&s_tilde)?);
            next_b.push(b);
        }
        let x = critic_input(bundle, &t.next_state, &next_a, &next_b);
        let q_next = nets.critic_target.forward(&x)?[0];
        targets.push(t.reward + bundle.config.gamma * q_next);
    }
    Ok(targets)
}

/// Mean-squared-error loss and its critic-parameter gradient at the batch.
pub fn critic_loss_gradients(
    bundle: &AgentBundle,
    agent: usize,
    batch: &[&Transition],
    targets: &[f64],
) -> Result<(f64, Gradients)> {
    let nets = &bundle.nets[agent];
    let k = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(&nets.critic);
    for (t, &y) in batch.iter().zip(targets) {
        let x = critic_input(bundle, &t.state, &t.agent_actions, &t.adversary_actions);
        let q = nets.critic.forward(&x)?[0];
        loss += (q - y).powi(2) / k;
        let (g, _) = nets.critic.backward(&x, &[2.0 * (q - y) / k])?;
        grads.accumulate(&g, 1.0);
    }
    Ok((loss, grads))
}

/// One descent step on the TD loss; returns the pre-step loss.
pub fn critic_update(bundle: &mut AgentBundle, agent: usize, batch: &[&Transition]) -> Result<f64> {
    let targets = critic_targets(bundle, agent, batch)?;
    let (loss, grads) = critic_loss_gradients(bundle, agent, batch, &targets)?;
    let nets = &mut bundle.nets[agent];
    let mut critic = std::mem::replace(&mut nets.critic, Mlp::zeros(&[1, 1], OutputActivation::Linear)?);
    nets.critic_opt.step(&mut critic, &grads);
    nets.critic = critic;
    Ok(loss)
}

/// Ascent direction for the actor: `(1/K) sum_k grad_theta pi(s~_k) grad_a q`,
/// with the agent's own action recomputed by the live actor and everything
/// else taken from the batch.
pub fn actor_gradient(bundle: &AgentBundle, agent: usize, batch: &[&Transition]) -> Result<Gradients> {
    let nets = &bundle.nets[agent];
    let k = batch.len() as f64;
    let mut grads = Gradients::zeros_like(&nets.actor);
    for t in batch {
        let s_tilde = &t.perturbed[agent];
        let a_i = nets.actor.forward(s_tilde)?;
        let mut actions = t.agent_actions.clone();
        actions[agent] = a_i;
        let x = critic_input(bundle, &t.state, &actions, &t.adversary_actions);
        let dq_dx = nets.critic.input_gradient(&x, &[1.0])?;
        let off = action_offset(bundle, agent);
        let dq_da = &dq_dx[off..off + bundle.action_dim];
        let (g, _) = nets.actor.backward(s_tilde, dq_da)?;
        grads.accumulate(&g, 1.0 / k);
    }
    Ok(grads)
}

/// Descent direction for the adversary: `(1/K) sum_k grad_omega rho(s_k)
/// [grad_b q + reg]` where `reg` routes the perturbation through the actor
/// into the critic's action slot. The perturbation is additive on the
/// newest frame, so its Jacobian in `b` is the identity.
pub fn adversary_gradient(
    bundle: &AgentBundle,
    agent: usize,
    batch: &[&Transition],
) -> Result<Gradients> {
    let nets = &bundle.nets[agent];
    let k = batch.len() as f64;
    let mut grads = Gradients::zeros_like(&nets.adversary);
    for t in batch {
        let b_i = nets.adversary.forward(&t.state)?;
        let s_tilde = perturb_stacked(&t.observations[agent], &b_i);
        let a_i = nets.actor.forward(&s_tilde)?;
        let mut actions = t.agent_actions.clone();
        actions[agent] = a_i;
        let mut perturbations = t.adversary_actions.clone();
        perturbations[agent] = b_i.clone();
        let x = critic_input(bundle, &t.state, &actions, &perturbations);
        let dq_dx = nets.critic.input_gradient(&x, &[1.0])?;
        let a_off = action_offset(bundle, agent);
        let dq_da = &dq_dx[a_off..a_off + bundle.action_dim];
        let b_off = perturbation_offset(bundle, agent);
        let dq_db = &dq_dx[b_off..b_off + bundle.obs_dim];
        // reg: critic's action sensitivity, back through the actor to the
        // newest observation frame
        let d_s_tilde = nets.actor.input_gradient(&s_tilde, dq_da)?;
        let upstream: Vec<f64> = dq_db
            .iter()
            .zip(&d_s_tilde[..bundle.obs_dim])
            .map(|(direct, reg)| direct + reg)
            .collect();
        let (g, _) = nets.adversary.backward(&t.state, &upstream)?;
        grads.accumulate(&g, 1.0 / k);
    }
    Ok(grads)
}

/// Apply one actor-ascent and (when enabled) one adversary-descent step.
pub fn policy_update(bundle: &mut AgentBundle, agent: usize, batch: &[&Transition]) -> Result<()> {
    let actor_grads = actor_gradient(bundle, agent, batch)?;
    let adversary_grads = if bundle.config.adversaries_enabled {
        Some(adversary_gradient(bundle, agent, batch)?)
    } else {
        None
    };
    let nets = &mut bundle.nets[agent];
    let mut actor = std::mem::replace(&mut nets.actor, Mlp::zeros(&[1, 1], OutputActivation::Linear)?);
    nets.actor_opt.step_ascent(&mut actor, &actor_grads);
    nets.actor = actor;
    if let Some(grads) = adversary_grads {
        let mut adversary =
            std::mem::replace(&mut nets.adversary, Mlp::zeros(&[1, 1], OutputActivation::Linear)?);
        nets.adversary_opt.step(&mut adversary, &grads);
        nets.adversary = adversary;
    }
    Ok(())
}

/// Move every target `tau` of the way toward its live network.
pub fn soft_update(bundle: &mut AgentBundle, tau: f64) -> Result<()> {
    for nets in bundle.nets.iter_mut() {
        nets.critic_target.track(&nets.critic, tau)?;
        nets.actor_target.track(&nets.actor, tau)?;
        nets.adversary_target.track(&nets.adversary, tau)?;
    }
    Ok(())
}

/// One point of the reward curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPoint {
    pub episode: usize,
    pub episode_reward: f64,
}

/// Full training loop on the particle environment: explore with decaying
/// Gaussian noise on both actions and perturbations, store, and run the
/// inner update loop with periodic soft target updates.
pub fn train_rmaac(
    env: &ParticleEnv,
    config: RmaacConfig,
    seed: u64,
) -> Result<(AgentBundle, Vec<RewardPoint>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = AgentBundle::new(
        config.clone(),
        env::NUM_AGENTS,
        env::OBS_DIM,
        env::ACTION_DIM,
        env::GLOBAL_STATE_DIM,
        env.max_force,
        &mut rng,
    )?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut curve = Vec::with_capacity(config.episodes);
    let noise = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut steps_since_update = 0usize;
    for episode in 1..=config.episodes {
        let decay = 1.0 - (episode - 1) as f64 / config.episodes.max(1) as f64;
        let scale = config.noise_scale * decay;
        let mut state = env.reset(&mut rng);
        let mut histories: Vec<Vec<Vec<f64>>> = (0..env::NUM_AGENTS)
            .map(|i| Ok(vec![env.observation(&state, i)?]) as Result<_>)
            .collect::<Result<_>>()?;
        let mut episode_reward = 0.0;
        loop {
            let gs = env.global_state(&state);
            let mut raw_stacked = Vec::with_capacity(env::NUM_AGENTS);
            let mut perturbed = Vec::with_capacity(env::NUM_AGENTS);
            let mut actions = Vec::with_capacity(env::NUM_AGENTS);
            let mut perturbations = Vec::with_capacity(env::NUM_AGENTS);
            for (i, nets) in bundle.nets.iter().enumerate() {
                let stacked = frame_stack(&histories[i], config.frame_stack)?;
                let mut b = if config.adversaries_enabled {
                    nets.adversary.forward(&gs)?
                } else {
                    vec![0.0; env::OBS_DIM]
                };
                if config.adversaries_enabled {
                    for x in b.iter_mut() {
                        *x = (*x + scale * noise.sample(&mut rng))
                            .clamp(-config.epsilon, config.epsilon);
                    }
                }
                let s_tilde = perturb_stacked(&stacked, &b);
                let mut a = nets.actor.forward(&s_tilde)?;
                for x in a.iter_mut() {
                    *x = (*x + scale * noise.sample(&mut rng))
                        .clamp(-env.max_force, env.max_force);
                }
                raw_stacked.push(stacked);
                perturbed.push(s_tilde);
                actions.push(a);
                perturbations.push(b);
            }
            let out = env.step(&state, &actions)?;
            episode_reward += out.reward;
            let mut next_stacked = Vec::with_capacity(env::NUM_AGENTS);
            for (i, history) in histories.iter_mut().enumerate() {
                history.insert(0, env.observation(&out.next, i)?);
                history.truncate(config.frame_stack);
                next_stacked.push(frame_stack(history, config.frame_stack)?);
            }
            buffer.push(Transition {
                state: gs,
                observations: raw_stacked,
                perturbed,
                agent_actions: actions,
                adversary_actions: perturbations,
                reward: out.reward,
                next_state: env.global_state(&out.next),
                next_observations: next_stacked,
            });
            state = out.next;
            steps_since_update += 1;
            if steps_since_update >= config.update_every && buffer.len() >= config.minibatch {
                steps_since_update = 0;
                for _ in 0..config.iteration_steps {
                    for agent in 0..bundle.num_agents {
                        let batch = buffer.sample(config.minibatch, &mut rng)?;
                        critic_update(&mut bundle, agent, &batch)?;
                        policy_update(&mut bundle, agent, &batch)?;
                    }
                    soft_update(&mut bundle, config.tau)?;
                }
                if bundle.max_abs_param() > 1e6 {
                    return Err(Error::NotConverged {
                        tol: 1e6,
                        iters: episode,
                        best: bundle.max_abs_param(),
                    });
                }
            }
            if out.done {
                break;
            }
        }
        curve.push(RewardPoint { episode, episode_reward });
    }
    Ok((bundle, curve))
}

/// Deterministic evaluation rollouts: actors act greedily; when
/// `use_adversary` is set the bundle's adversaries perturb observations.
pub fn evaluate_rmaac(
    env: &ParticleEnv,
    bundle: &AgentBundle,
    episodes: usize,
    seed: u64,
    use_adversary: bool,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = bundle.config.frame_stack;
    let mut rewards = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        let mut histories: Vec<Vec<Vec<f64>>> = (0..env::NUM_AGENTS)
            .map(|i| Ok(vec![env.observation(&state, i)?]) as Result<_>)
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        loop {
            let gs = env.global_state(&state);
            let mut actions = Vec::with_capacity(env::NUM_AGENTS);
            for (i, nets) in bundle.nets.iter().enumerate() {
                let stacked = frame_stack(&histories[i], h)?;
                let s_tilde = if use_adversary {
                    perturb_stacked(&stacked, &nets.adversary.forward(&gs)?)
                } else {
                    stacked
                };
                actions.push(nets.actor.forward(&s_tilde)?);
            }
            let out = env.step(&state, &actions)?;
            total += out.reward;
            for (i, history) in histories.iter_mut().enumerate() {
                history.insert(0, env.observation(&out.next, i)?);
                history.truncate(h);
            }
            state = out.next;
            if out.done {
                break;
            }
        }
        rewards.push(total);
    }
    Ok(rewards)
}

/// Evaluate the bundle's actors under an attack family instead of (or on
/// top of) the trained adversary; families that need an adversary use the
/// supplied bundle's (e.g. a non-optimal checkpoint for f3).
pub fn evaluate_under_attack(
    env: &ParticleEnv,
    bundle: &AgentBundle,
    adversary_source: Option<&AgentBundle>,
    spec: &AttackSpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if spec.family.needs_adversary() && adversary_source.is_none() {
        return Err(Error::Config(format!(
            "attack family {:?} requires trained adversary networks",
            spec.family
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = bundle.config.frame_stack;
    let mut rewards = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng);
        let mut histories: Vec<Vec<Vec<f64>>> = (0..env::NUM_AGENTS)
            .map(|i| Ok(vec![env.observation(&state, i)?]) as Result<_>)
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        loop {
            let gs = env.global_state(&state);
            let mut actions = Vec::with_capacity(env::NUM_AGENTS);
            for (i, nets) in bundle.nets.iter().enumerate() {
                let stacked = frame_stack(&histories[i], h)?;
                let b = match adversary_source {
                    Some(source) => Some(source.nets[i].adversary.forward(&gs)?),
                    None => None,
                };
                let newest = &stacked[..bundle.obs_dim];
                let attacked =
                    env::apply_attack(spec, newest, b.as_deref(), &mut rng)?;
                let mut s_tilde = stacked.clone();
                s_tilde[..bundle.obs_dim].copy_from_slice(&attacked);
                actions.push(nets.actor.forward(&s_tilde)?);
            }
            let out = env.step(&state, &actions)?;
            total += out.reward;
            for (i, history) in histories.iter_mut().enumerate() {
                history.insert(0, env.observation(&out.next, i)?);
                history.truncate(h);
            }
            state = out.next;
            if out.done {
                break;
            }
        }
        rewards.push(total);
    }
    Ok(rewards)
}

/// A sample for the stochastic (score-function) gradient estimators: the
/// state seen by the adversary, the agent's raw observation, the sampled
/// perturbation and action, and the critic value weighting the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticSample {
    pub state: Vec<f64>,
    pub observation: Vec<f64>,
    pub perturbation: Vec<f64>,
    pub action: Vec<f64>,
    pub q: f64,
}

/// Score-function gradient estimates for Gaussian policies whose means are
/// the given networks: the actor estimate is `(1/K) sum q_k grad_theta log
/// pi(a_k | s~_k)`; the adversary estimate adds the correction term that
/// routes the perturbation mean through the actor's log-density.
pub fn stochastic_policy_gradients(
    actor_mean: &Mlp,
    adversary_mean: &Mlp,
    sigma_a: f64,
    sigma_b: f64,
    batch: &[StochasticSample],
) -> Result<(Gradients, Gradients)> {
    if sigma_a <= 0.0 || sigma_b <= 0.0 {
        return Err(Error::Config("stochastic policies need positive scales".into()));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty stochastic batch".into()));
    }
    let k = batch.len() as f64;
    let mut actor_grads = Gradients::zeros_like(actor_mean);
    let mut adversary_grads = Gradients::zeros_like(adversary_mean);
    for sample in batch {
        // actor: grad of q * log N(a; mu(obs + b), sigma_a^2)
        let s_tilde: Vec<f64> = sample
            .observation
            .iter()
            .zip(&sample.perturbation)
            .map(|(o, b)| o + b)
            .collect();
        let mu = actor_mean.forward(&s_tilde)?;
        let upstream_a: Vec<f64> = sample
            .action
            .iter()
            .zip(&mu)
            .map(|(a, m)| sample.q * (a - m) / (sigma_a * sigma_a))
            .collect();
        let (ga, _) = actor_mean.backward(&s_tilde, &upstream_a)?;
        actor_grads.accumulate(&ga, 1.0 / k);

        // adversary score term: q * grad log N(b; nu(s), sigma_b^2)
        let nu = adversary_mean.forward(&sample.state)?;
        let mut upstream_b: Vec<f64> = sample
            .perturbation
            .iter()
            .zip(&nu)
            .map(|(b, n)| sample.q * (b - n) / (sigma_b * sigma_b))
            .collect();
        // correction: the mean perturbation shifts the actor's density of
        // the sampled action — chain through s~ = obs + nu(s)
        let s_tilde_mean: Vec<f64> = sample
            .observation
            .iter()
            .zip(&nu)
            .map(|(o, n)| o + n)
            .collect();
        let mu_at_mean = actor_mean.forward(&s_tilde_mean)?;
        let upstream_mu: Vec<f64> = sample
            .action
            .iter()
            .zip(&mu_at_mean)
            .map(|(a, m)| sample.q * (a - m) / (sigma_a * sigma_a))
            .collect();
        let reg = actor_mean.input_gradient(&s_tilde_mean, &upstream_mu)?;
        for (u, r) in upstream_b.iter_mut().zip(&reg) {
            *u += r;
        }
        let (gb, _) = adversary_mean.backward(&sample.state, &upstream_b)?;
        adversary_grads.accumulate(&gb, 1.0 / k);
    }
    Ok((actor_grads, adversary_grads))
}

/// Everything needed to rebuild a bundle: config, dimensions, and all
/// network parameters (optimizer moments restart fresh on load).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RmaacConfig,
    pub num_agents: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub action_bound: f64,
    pub critics: Vec<Mlp>,
    pub actors: Vec<Mlp>,
    pub adversaries: Vec<Mlp>,
    pub critic_targets: Vec<Mlp>,
    pub actor_targets: Vec<Mlp>,
    pub adversary_targets: Vec<Mlp>,
}

impl AgentBundle {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            num_agents: self.num_agents,
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            state_dim: self.state_dim,
            action_bound: self.action_bound,
            critics: self.nets.iter().map(|n| n.critic.clone()).collect(),
            actors: self.nets.iter().map(|n| n.actor.clone()).collect(),
            adversaries: self.nets.iter().map(|n| n.adversary.clone()).collect(),
            critic_targets: self.nets.iter().map(|n| n.critic_target.clone()).collect(),
            actor_targets: self.nets.iter().map(|n| n.actor_target.clone()).collect(),
            adversary_targets: self.nets.iter().map(|n| n.adversary_target.clone()).collect(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        cp.config.validate()?;
        let lists = [
            &cp.critics,
            &cp.actors,
            &cp.adversaries,
            &cp.critic_targets,
            &cp.actor_targets,
            &cp.adversary_targets,
        ];
        if lists.iter().any(|l| l.len() != cp.num_agents) {
            return Err(Error::Shape("checkpoint network counts disagree".into()));
        }
        let mut nets = Vec::with_capacity(cp.num_agents);
        for i in 0..cp.num_agents {
            let critic = cp.critics[i].clone();
            let actor = cp.actors[i].clone();
            let adversary = cp.adversaries[i].clone();
            nets.push(AgentNets {
                critic_opt: Adam::new(&critic, cp.config.critic_lr),
                actor_opt: Adam::new(&actor, cp.config.actor_lr),
                adversary_opt: Adam::new(&adversary, cp.config.adversary_lr),
                critic_target: cp.critic_targets[i].clone(),
                actor_target: cp.actor_targets[i].clone(),
                adversary_target: cp.adversary_targets[i].clone(),
                critic,
                actor,
                adversary,
            });
        }
        Ok(Self {
            config: cp.config,
            nets,
            num_agents: cp.num_agents,
            obs_dim: cp.obs_dim,
            action_dim: cp.action_dim,
            state_dim: cp.state_dim,
            action_bound: cp.action_bound,
        })
    }
}

/// Writes the reward curve as `episode,episode_reward`.
pub fn curve_to_csv(curve: &[RewardPoint]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["episode", "episode_reward"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for point in curve {
        writer
            .write_record([point.episode.to_string(), format!("{}", point.episode_reward)])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}
