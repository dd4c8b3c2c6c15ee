//! Goal-conditioned single-player environment contract.
//!
//! Every environment is immutable after construction. Episode state lives in
//! `Self::State` values that carry their own step counter and terminal flag,
//! so the same environment can be shared by searches, relabeling and
//! evaluation without synchronisation.

use std::fmt::Debug;

use rand::RngCore;

use crate::{Error, Result};

/// Static shape information about an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub action_count: usize,
    pub horizon: usize,
    pub feature_dim: usize,
    pub goal_dim: usize,
    /// Multiplier mapping a return-to-go onto the value head's range.
    pub value_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalObservation<S, G> {
    pub state: S,
    pub achieved_goal: G,
    pub desired_goal: G,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<S, G> {
    pub observation: GoalObservation<S, G>,
    pub reward: f64,
    pub terminal: bool,
    pub success: bool,
}

pub trait Environment: Send + Sync {
    type State: Clone + Debug + PartialEq + Send + Sync;
    type Goal: Clone + Debug + PartialEq + Send + Sync;

    fn spec(&self) -> &EnvSpec;

    /// Starts an episode. With `goal_override` the desired goal is taken as
    /// given (after validation), otherwise it is drawn from the environment's
    /// goal distribution.
    fn reset(
        &self,
        rng: &mut dyn RngCore,
        goal_override: Option<Self::Goal>,
    ) -> Result<GoalObservation<Self::State, Self::Goal>>;

    /// Applies `action` to `state` under `desired`. The reward always comes
    /// from [`Environment::compute_reward`].
    fn step(
        &self,
        state: &Self::State,
        desired: &Self::Goal,
        action: usize,
    ) -> Result<StepResult<Self::State, Self::Goal>>;

    fn achieved_goal(&self, state: &Self::State) -> Self::Goal;

    /// Returns `(reward, success)`. Pure; shared by live stepping and relabeling.
    fn compute_reward(&self, achieved: &Self::Goal, desired: &Self::Goal) -> Result<(f64, bool)>;

    fn legal_actions(&self, state: &Self::State) -> Result<Vec<bool>>;

    /// Network input for `state` conditioned on `desired`; always
    /// `spec().feature_dim` entries.
    fn encode(&self, state: &Self::State, desired: &Self::Goal) -> Vec<f64>;

    fn is_terminal(&self, state: &Self::State) -> bool;

    /// Number of steps taken to reach `state`.
    fn elapsed(&self, state: &Self::State) -> usize;

    /// Distance in goal space, used by experience ranking.
    fn goal_distance(&self, a: &Self::Goal, b: &Self::Goal) -> f64;

    /// Value assigned to terminal search leaves (no reward follows a terminal).
    fn terminal_value(&self, _state: &Self::State) -> f64 {
        0.0
    }

    /// Whether `goal` can ever satisfy the goal predicate.
    fn is_valid_goal(&self, _goal: &Self::Goal) -> bool {
        true
    }

    /// Whether achieved goals of non-terminal states can satisfy the goal
    /// predicate, i.e. whether the `future` relabeling strategy makes sense.
    fn supports_future_goals(&self) -> bool {
        true
    }

    /// The goal used when relabeling a trajectory that ended in
    /// `terminal_state`. Environments with regenerable goals may resample
    /// (equation discovery draws a fresh dataset).
    fn hindsight_goal(
        &self,
        terminal_state: &Self::State,
        _resample: bool,
        _rng: &mut dyn RngCore,
    ) -> Option<Self::Goal> {
        let goal = self.achieved_goal(terminal_state);
        self.is_valid_goal(&goal).then_some(goal)
    }

    /// Adapts a state to a substituted goal. Identity for environments whose
    /// state does not depend on the goal.
    fn rebind_state(&self, state: &Self::State, _goal: &Self::Goal) -> Self::State {
        state.clone()
    }

    fn observe(
        &self,
        state: Self::State,
        desired: Self::Goal,
    ) -> GoalObservation<Self::State, Self::Goal> {
        let achieved_goal = self.achieved_goal(&state);
        GoalObservation {
            state,
            achieved_goal,
            desired_goal: desired,
        }
    }

    fn encode_observation(&self, obs: &GoalObservation<Self::State, Self::Goal>) -> Vec<f64> {
        self.encode(&obs.state, &obs.desired_goal)
    }
}

pub(crate) fn check_action(spec: &EnvSpec, action: usize) -> Result<()> {
    if action >= spec.action_count {
        return Err(Error::env(format!(
            "action {action} out of range (action_count {})",
            spec.action_count
        )));
    }
    Ok(())
}
