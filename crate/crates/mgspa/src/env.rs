//! Continuous-state two-agent navigation environment and the library of
//! observation-attack families used for robustness evaluation.

use crate::error::{Error, Result};
use crate::model::{project_to_ball, Metric};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Cooperative navigation at desk scale: two point agents push toward two
/// landmarks under damped Euler physics, sharing one reward.
///
/// Per-agent observation layout (10 entries):
///
/// | index | meaning                      |
/// |-------|------------------------------|
/// | 0..2  | own position (x, y)          |
/// | 2..4  | own velocity (x, y)          |
/// | 4..6  | landmark 0 offset from self  |
/// | 6..8  | landmark 1 offset from self  |
/// | 8..10 | other agent offset from self |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnv {
    pub landmarks: [[f64; 2]; 2],
    pub horizon: usize,
    /// Euler timestep.
    pub dt: f64,
    /// Velocity carry-over per step, in [0, 1].
    pub damping: f64,
    /// Per-axis force bound; actions outside are clamped and counted.
    pub max_force: f64,
    pub collision_radius: f64,
    pub collision_penalty: f64,
}

pub const NUM_AGENTS: usize = 2;
pub const OBS_DIM: usize = 10;
pub const ACTION_DIM: usize = 2;
/// Positions then velocities of both agents, then both landmarks.
pub const GLOBAL_STATE_DIM: usize = 12;

impl Default for ParticleEnv {
    fn default() -> Self {
        Self {
            landmarks: [[0.5, 0.5], [-0.5, -0.5]],
            horizon: 25,
            dt: 0.1,
            damping: 0.75,
            max_force: 1.0,
            collision_radius: 0.15,
            collision_penalty: 1.0,
        }
    }
}

/// Full physical state; a plain value so rollouts stay replayable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub positions: [[f64; 2]; 2],
    pub velocities: [[f64; 2]; 2],
    pub step: usize,
}

/// One physics step's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub reward: f64,
    pub next: EnvState,
    pub done: bool,
    /// Action components clamped to the force bound.
    pub clamped: usize,
}

impl ParticleEnv {
    /// Agents start uniformly in the unit square at rest.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let mut positions = [[0.0; 2]; 2];
        for p in positions.iter_mut() {
            for x in p.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        EnvState { positions, velocities: [[0.0; 2]; 2], step: 0 }
    }

    /// Shared reward of a state: negated sum over landmarks of the closest
    /// agent's distance, minus the collision penalty when the agents touch.
    pub fn reward(&self, state: &EnvState) -> f64 {
        let mut r = 0.0;
        for lm in &self.landmarks {
            let closest = state
                .positions
                .iter()
                .map(|p| dist(p, lm))
                .fold(f64::INFINITY, f64::min);
            r -= closest;
        }
        if dist(&state.positions[0], &state.positions[1]) < self.collision_radius {
            r -= self.collision_penalty;
        }
        r
    }

    /// Deterministic damped Euler update; reward is taken at the state the
    /// actions were applied in.
    pub fn step(&self, state: &EnvState, actions: &[Vec<f64>]) -> Result<EnvStep> {
        if actions.len() != NUM_AGENTS || actions.iter().any(|a| a.len() != ACTION_DIM) {
            return Err(Error::Shape(format!(
                "expected {NUM_AGENTS} actions of dimension {ACTION_DIM}"
            )));
        }
        let mut next = state.clone();
        let mut clamped = 0;
        for (i, action) in actions.iter().enumerate() {
            for d in 0..2 {
                let mut force = action[d];
                if force.abs() > self.max_force {
                    force = force.clamp(-self.max_force, self.max_force);
                    clamped += 1;
                }
                next.velocities[i][d] = self.damping * next.velocities[i][d] + self.dt * force;
                next.positions[i][d] += self.dt * next.velocities[i][d];
            }
        }
        next.step = state.step + 1;
        Ok(EnvStep {
            reward: self.reward(state),
            done: next.step >= self.horizon,
            next,
            clamped,
        })
    }

    /// The documented 10-entry observation of one agent.
    pub fn observation(&self, state: &EnvState, agent: usize) -> Result<Vec<f64>> {
        if agent >= NUM_AGENTS {
            return Err(Error::Shape(format!("agent index {agent} out of range")));
        }
        let own = state.positions[agent];
        let other = state.positions[1 - agent];
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.extend_from_slice(&own);
        obs.extend_from_slice(&state.velocities[agent]);
        for lm in &self.landmarks {
            obs.push(lm[0] - own[0]);
            obs.push(lm[1] - own[1]);
        }
        obs.push(other[0] - own[0]);
        obs.push(other[1] - own[1]);
        Ok(obs)
    }

    /// Centralized-critic input: positions, velocities, landmarks.
    pub fn global_state(&self, state: &EnvState) -> Vec<f64> {
        let mut out = Vec::with_capacity(GLOBAL_STATE_DIM);
        for p in &state.positions {
            out.extend_from_slice(p);
        }
        for v in &state.velocities {
            out.extend_from_slice(v);
        }
        for lm in &self.landmarks {
            out.extend_from_slice(lm);
        }
        out
    }
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// The six attack families. Families 1–3 and 6 center on an adversary
/// output `b`; 4 and 5 are policy-free noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    /// `s + b`, projected to the ball.
    F1,
    /// `s + Gaussian(b, sigma)`, projected.
    F2,
    /// `s + Gaussian(b, 1)` with a non-optimal adversary, projected.
    F3,
    /// `s + Uniform(-eps, eps)` per dimension.
    F4,
    /// `s + Gaussian(0, 1)`, deliberately unprojected.
    F5,
    /// `s + Laplace(b, 1)`, projected.
    F6,
}

impl AttackFamily {
    /// Whether the family centers its noise on an adversary's output.
    pub fn needs_adversary(self) -> bool {
        matches!(self, AttackFamily::F1 | AttackFamily::F2 | AttackFamily::F3 | AttackFamily::F6)
    }

    /// Whether the perturbed observation is projected back to the ball.
    pub fn projects(self) -> bool {
        !matches!(self, AttackFamily::F5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    /// Noise scale for the Gaussian families; fixed to 1 for f3/f5/f6.
    pub sigma: f64,
    pub metric: Metric,
}

impl AttackSpec {
    pub fn new(family: AttackFamily, epsilon: f64, sigma: f64) -> Result<Self> {
        if epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon {epsilon} must be non-negative")));
        }
        if sigma < 0.0 {
            return Err(Error::Config(format!("sigma {sigma} must be non-negative")));
        }
        Ok(Self { family, epsilon, sigma, metric: Metric::LInf })
    }
}

/// Perturb one agent's observation. `b` is the adversary's output for the
/// families that use one; it must already lie in the ball.
pub fn apply_attack<R: Rng + ?Sized>(
    spec: &AttackSpec,
    s: &[f64],
    b: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let center: Option<&[f64]> = if spec.family.needs_adversary() {
        let b = b.ok_or_else(|| {
            Error::Config(format!("attack family {:?} requires an adversary output", spec.family))
        })?;
        if b.len() != s.len() {
            return Err(Error::Shape("adversary output length != state length".into()));
        }
        Some(b)
    } else {
        None
    };
    let noise: Vec<f64> = match spec.family {
        AttackFamily::F1 => center.unwrap().to_vec(),
        AttackFamily::F2 => gaussian_around(center.unwrap(), spec.sigma, rng)?,
        AttackFamily::F3 => gaussian_around(center.unwrap(), 1.0, rng)?,
        AttackFamily::F4 => s
            .iter()
            .map(|_| {
                if spec.epsilon == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-spec.epsilon..spec.epsilon)
                }
            })
            .collect(),
        AttackFamily::F5 => gaussian_around(&vec![0.0; s.len()], 1.0, rng)?,
        AttackFamily::F6 => center.unwrap().iter().map(|&m| m + laplace(1.0, rng)).collect(),
    };
    let perturbed: Vec<f64> = s.iter().zip(&noise).map(|(x, n)| x + n).collect();
    if spec.family.projects() {
        Ok(project_to_ball(s, &perturbed, spec.epsilon, spec.metric))
    } else {
        Ok(perturbed)
    }
}

fn gaussian_around<R: Rng + ?Sized>(mean: &[f64], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::Config(format!("bad Gaussian scale: {e}")))?;
    Ok(mean.iter().map(|&m| m + normal.sample(rng)).collect())
}

/// Standard Laplace draw by inverse transform.
fn laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}
