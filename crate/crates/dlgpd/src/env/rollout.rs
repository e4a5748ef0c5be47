//! Rollout collection with a random excitation policy.
//!
//! A rollout of length `T` holds `T + 2` rendered frames `i_0 .. i_{T+1}` and
//! `T` recorded transitions. Observations chain through shared frames:
//! `o_t = (i_{t-1}, i_t)`, so `o_1` needs one bootstrap action to produce
//! `i_1` before the first recorded transition `(o_1, a_1, o_2, r_2)`.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::render::{make_observation, render, Frame, Observation};
use super::{step, PendulumParams, PhysicalState};
use crate::error::{Error, Result};
use crate::util::Stream;

/// Uniform box distribution over initial states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitDistribution {
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_dot_min: f64,
    pub theta_dot_max: f64,
}

impl InitDistribution {
    /// Training distribution: full angle range, high velocities.
    pub fn excitation() -> Self {
        InitDistribution {
            theta_min: -std::f64::consts::PI,
            theta_max: std::f64::consts::PI,
            theta_dot_min: -8.0,
            theta_dot_max: 8.0,
        }
    }

    /// Control-evaluation distribution: hanging down, nearly at rest.
    pub fn hanging_down() -> Self {
        InitDistribution {
            theta_min: std::f64::consts::PI - 0.05,
            theta_max: std::f64::consts::PI + 0.05,
            theta_dot_min: -0.05,
            theta_dot_max: 0.05,
        }
    }

    pub fn sample(&self, rng: &mut Stream) -> PhysicalState {
        let theta = rng.random_range(self.theta_min..=self.theta_max);
        let theta_dot = rng.random_range(self.theta_dot_min..=self.theta_dot_max);
        PhysicalState::new(theta, theta_dot)
    }
}

/// Action source for rollout collection.
pub trait Policy {
    fn action(&mut self, state: &PhysicalState, rng: &mut Stream) -> f64;
}

/// Uniform random actions on `[-bound, bound]`.
pub struct UniformPolicy {
    pub bound: f64,
}

impl Policy for UniformPolicy {
    fn action(&mut self, _state: &PhysicalState, rng: &mut Stream) -> f64 {
        rng.random_range(-self.bound..=self.bound)
    }
}

/// One recorded transition `(o_t, a_t, o_{t+1}, r_{t+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: f64,
    pub next_obs: Observation,
    pub reward: f64,
}

/// A collected rollout: the frame chain plus per-transition actions/rewards.
/// True physical states are retained for diagnostics and visualization only;
/// the model never sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `T + 2` frames `i_0 .. i_{T+1}`.
    pub frames: Vec<Frame>,
    /// The action that produced `i_1` but belongs to no recorded transition.
    pub bootstrap_action: f64,
    /// `T` actions `a_1 .. a_T`.
    pub actions: Vec<f64>,
    /// `T` rewards `r_2 .. r_{T+1}`.
    pub rewards: Vec<f64>,
    pub init_state: PhysicalState,
    /// `T + 2` states matching `frames`, when recorded.
    pub true_states: Option<Vec<PhysicalState>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Observation `o_{t+1} = (i_t, i_{t+1})` for `t = 0 .. T`.
    pub fn observation(&self, t: usize) -> Observation {
        make_observation(self.frames[t].clone(), self.frames[t + 1].clone())
    }

    /// Number of observations `o_1 .. o_{T+1}`.
    pub fn num_observations(&self) -> usize {
        self.frames.len() - 1
    }

    /// Materializes transition `k` (0-based: `(o_{k+1}, a_{k+1}, o_{k+2}, r_{k+2})`).
    pub fn transition(&self, k: usize) -> Transition {
        Transition {
            obs: self.observation(k),
            action: self.actions[k],
            next_obs: self.observation(k + 1),
            reward: self.rewards[k],
        }
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len()).map(|k| self.transition(k))
    }

    /// Consecutive transitions share frames bit-identically.
    pub fn validate_chaining(&self) -> Result<()> {
        if self.frames.len() != self.actions.len() + 2 || self.rewards.len() != self.actions.len() {
            return Err(Error::Shape(format!(
                "rollout bookkeeping: {} frames, {} actions, {} rewards",
                self.frames.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        Ok(())
    }
}

/// Collects one rollout: draw the initial state, render it, take one
/// bootstrap action to complete the first observation, then record `length`
/// transitions. Deterministic given the RNG stream.
pub fn collect_rollout(
    params: &PendulumParams,
    init: &InitDistribution,
    policy: &mut dyn Policy,
    length: usize,
    rng: &mut Stream,
    record_true_states: bool,
) -> Result<Rollout> {
    if length == 0 {
        return Err(Error::InvalidArgument("rollout length must be >= 1".into()));
    }
    params.validate()?;
    let init_state = init.sample(rng);
    let mut frames = Vec::with_capacity(length + 2);
    let mut states = Vec::with_capacity(length + 2);
    let mut state = init_state;
    frames.push(render(&state));
    states.push(state);

    let bootstrap_action = policy.action(&state, rng);
    let (s1, _bootstrap_reward) = step(&state, bootstrap_action, params)?;
    state = s1;
    frames.push(render(&state));
    states.push(state);

    let mut actions = Vec::with_capacity(length);
    let mut rewards = Vec::with_capacity(length);
    for _ in 0..length {
        let a = policy.action(&state, rng);
        let (next, r) = step(&state, a, params)?;
        state = next;
        frames.push(render(&state));
        states.push(state);
        actions.push(a);
        rewards.push(r);
    }

    Ok(Rollout {
        frames,
        bootstrap_action,
        actions,
        rewards,
        init_state,
        true_states: record_true_states.then_some(states),
    })
}
