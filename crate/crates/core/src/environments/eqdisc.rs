//! Equation discovery: build an expression rule by rule (leftmost derivation)
//! until it reproduces a measurement dataset.
//!
//! The goal is the dataset itself, so hindsight relabeling swaps in the
//! dataset produced by whatever expression a trajectory ended with. Incomplete
//! derivations achieve the [`EqGoal::Incomplete`] sentinel, which never
//! satisfies the goal predicate.

use std::sync::Arc;

use rand::{Rng, RngCore};

use crate::envcore::{check_action, EnvSpec, Environment, GoalObservation, StepResult};
use crate::grammar::{nrmse_values, sample_dataset, Dataset, Derivation, Expression, Grammar};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub id: String,
    pub expression: Expression,
    /// Ground-truth leftmost derivation.
    pub rules: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct EqDiscConfig {
    pub grammar: Arc<Grammar>,
    pub n_points: usize,
    pub x_range: (f64, f64),
    pub nrmse_threshold: f64,
    pub max_rules: usize,
    pub targets: Vec<Expression>,
}

impl EqDiscConfig {
    pub fn shipped() -> Self {
        let grammar = Arc::new(
            Grammar::parse(include_str!("../../data/grammar_default.txt"))
                .expect("shipped grammar parses"),
        );
        EqDiscConfig {
            grammar,
            n_points: 10,
            x_range: (-2.0, 2.0),
            nrmse_threshold: 1e-6,
            max_rules: 10,
            targets: parse_target_pool(include_str!("../../data/targets_default.txt"))
                .expect("shipped targets parse"),
        }
    }
}

/// One infix expression per line; `#` starts a comment.
pub fn parse_target_pool(text: &str) -> Result<Vec<Expression>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(Expression::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum EqGoal {
    Data(Dataset),
    Incomplete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqState {
    pub derivation: Derivation,
    /// The episode's x points; achieved goals are evaluated on them.
    pub xs: Arc<Vec<f64>>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct EquationDiscovery {
    config: EqDiscConfig,
    targets: Vec<Target>,
    spec: EnvSpec,
}

impl EquationDiscovery {
    pub fn new(config: EqDiscConfig) -> Result<Self> {
        if config.targets.is_empty() {
            return Err(Error::env("equation discovery needs a non-empty target pool"));
        }
        if config.n_points < 2 {
            return Err(Error::env("equation discovery needs n_points >= 2"));
        }
        if !(config.nrmse_threshold > 0.0) {
            return Err(Error::env("nrmse_threshold must be positive"));
        }
        if config.max_rules == 0 {
            return Err(Error::env("max_rules must be positive"));
        }
        let targets = config
            .targets
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let rules = config.grammar.derive(e, config.max_rules).ok_or_else(|| {
                    Error::env(format!(
                        "target `{e}` is not derivable within {} rules",
                        config.max_rules
                    ))
                })?;
                Ok(Target {
                    id: format!("t{i}"),
                    expression: e.clone(),
                    rules,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rules = config.grammar.rule_count();
        let spec = EnvSpec {
            action_count: rules,
            horizon: config.max_rules,
            feature_dim: config.max_rules * rules + config.n_points + 2,
            goal_dim: config.n_points,
            value_scale: 1.0,
        };
        Ok(EquationDiscovery {
            config,
            targets,
            spec,
        })
    }

    pub fn config(&self) -> &EqDiscConfig {
        &self.config
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.config.grammar
    }

    /// Samples a fresh dataset for target `index`.
    pub fn target_dataset(&self, index: usize, rng: &mut dyn RngCore) -> Result<Dataset> {
        let t = self
            .targets
            .get(index)
            .ok_or_else(|| Error::env(format!("no target {index}")))?;
        sample_dataset(&t.expression, self.config.n_points, self.config.x_range, rng)
    }

    pub fn initial_state(&self, data: &Dataset) -> EqState {
        EqState {
            derivation: Derivation::new(Arc::clone(&self.config.grammar)),
            xs: Arc::new(data.xs().to_vec()),
            done: false,
        }
    }

    /// Re-derives the state reached after `rules` from the initial state.
    pub fn replay(&self, data: &Dataset, rules: &[usize]) -> Result<Vec<EqState>> {
        let goal = EqGoal::Data(data.clone());
        let mut states = vec![self.initial_state(data)];
        for &r in rules {
            let next = self.step(states.last().unwrap(), &goal, r)?.observation.state;
            states.push(next);
        }
        Ok(states)
    }
}

impl Environment for EquationDiscovery {
    type State = EqState;
    type Goal = EqGoal;

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(
        &self,
        rng: &mut dyn RngCore,
        goal_override: Option<EqGoal>,
    ) -> Result<GoalObservation<EqState, EqGoal>> {
        let data = match goal_override {
            Some(EqGoal::Data(d)) => {
                if d.len() != self.config.n_points {
                    return Err(Error::env(format!(
                        "goal dataset has {} points, expected {}",
                        d.len(),
                        self.config.n_points
                    )));
                }
                d
            }
            Some(EqGoal::Incomplete) => {
                return Err(Error::env("the incomplete sentinel is not a valid goal"))
            }
            None => {
                let i = rng.gen_range(0..self.targets.len());
                self.target_dataset(i, rng)?
            }
        };
        let state = self.initial_state(&data);
        Ok(self.observe(state, EqGoal::Data(data)))
    }

    fn step(
        &self,
        state: &EqState,
        desired: &EqGoal,
        action: usize,
    ) -> Result<StepResult<EqState, EqGoal>> {
        check_action(&self.spec, action)?;
        if state.done {
            return Err(Error::env("cannot step a terminal state"));
        }
        let derivation = state.derivation.apply_rule(action).map_err(|e| Error::env(e.to_string()))?;
        let done =
            derivation.is_complete() || derivation.applied_rules().len() >= self.config.max_rules;
        let next = EqState {
            derivation,
            xs: Arc::clone(&state.xs),
            done,
        };
        let achieved = self.achieved_goal(&next);
        let (reward, success) = self.compute_reward(&achieved, desired)?;
        Ok(StepResult {
            observation: GoalObservation {
                state: next,
                achieved_goal: achieved,
                desired_goal: desired.clone(),
            },
            reward,
            terminal: done,
            success,
        })
    }

    fn achieved_goal(&self, state: &EqState) -> EqGoal {
        if !state.derivation.is_complete() {
            return EqGoal::Incomplete;
        }
        state
            .derivation
            .to_expression()
            .ok()
            .and_then(|e| Dataset::from_expression(&e, &state.xs))
            .map_or(EqGoal::Incomplete, EqGoal::Data)
    }

    fn compute_reward(&self, achieved: &EqGoal, desired: &EqGoal) -> Result<(f64, bool)> {
        let desired = match desired {
            EqGoal::Data(d) => d,
            EqGoal::Incomplete => return Err(Error::env("desired goal cannot be the sentinel")),
        };
        let achieved = match achieved {
            EqGoal::Data(a) => a,
            EqGoal::Incomplete => return Ok((0.0, false)),
        };
        if achieved.xs() != desired.xs() {
            return Err(Error::env("achieved and desired datasets use different x points"));
        }
        let ok = nrmse_values(achieved.ys(), desired.ys()) <= self.config.nrmse_threshold;
        Ok(if ok { (1.0, true) } else { (0.0, false) })
    }

    fn legal_actions(&self, state: &EqState) -> Result<Vec<bool>> {
        if state.done {
            return Err(Error::env("terminal state has no legal actions"));
        }
        let nt = state
            .derivation
            .leftmost_nonterminal()
            .ok_or_else(|| Error::env("complete derivation has no legal actions"))?;
        Ok(self.config.grammar.rules_for(nt))
    }

    fn encode(&self, state: &EqState, desired: &EqGoal) -> Vec<f64> {
        let rules = self.config.grammar.rule_count();
        let mut out = vec![0.0; self.spec.feature_dim];
        for (slot, &r) in state
            .derivation
            .applied_rules()
            .iter()
            .take(self.config.max_rules)
            .enumerate()
        {
            out[slot * rules + r] = 1.0;
        }
        if let EqGoal::Data(d) = desired {
            let base = self.config.max_rules * rules;
            let n = d.len() as f64;
            let mean = d.ys().iter().sum::<f64>() / n;
            let var = d.ys().iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            for (i, y) in d.ys().iter().take(self.config.n_points).enumerate() {
                out[base + i] = if sd > 1e-12 { (y - mean) / sd } else { 0.0 };
            }
            let squash = |v: f64| v.signum() * v.abs().ln_1p();
            out[base + self.config.n_points] = squash(mean);
            out[base + self.config.n_points + 1] = squash(var);
        }
        out
    }

    fn is_terminal(&self, state: &EqState) -> bool {
        state.done
    }

    fn elapsed(&self, state: &EqState) -> usize {
        state.derivation.applied_rules().len()
    }

    fn goal_distance(&self, a: &EqGoal, b: &EqGoal) -> f64 {
        match (a, b) {
            (EqGoal::Data(a), EqGoal::Data(b)) if a.len() == b.len() => {
                let mse = a
                    .ys()
                    .iter()
                    .zip(b.ys())
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    / a.len() as f64;
                mse.sqrt()
            }
            _ => f64::INFINITY,
        }
    }

    fn is_valid_goal(&self, goal: &EqGoal) -> bool {
        matches!(goal, EqGoal::Data(_))
    }

    fn supports_future_goals(&self) -> bool {
        false
    }

    fn hindsight_goal(
        &self,
        terminal_state: &EqState,
        resample: bool,
        rng: &mut dyn RngCore,
    ) -> Option<EqGoal> {
        let achieved = self.achieved_goal(terminal_state);
        if !resample || achieved == EqGoal::Incomplete {
            return self.is_valid_goal(&achieved).then_some(achieved);
        }
        let expr = terminal_state.derivation.to_expression().ok()?;
        sample_dataset(&expr, self.config.n_points, self.config.x_range, rng)
            .ok()
            .map(EqGoal::Data)
    }

    fn rebind_state(&self, state: &EqState, goal: &EqGoal) -> EqState {
        match goal {
            EqGoal::Data(d) => EqState {
                derivation: state.derivation.clone(),
                xs: Arc::new(d.xs().to_vec()),
                done: state.done,
            },
            EqGoal::Incomplete => state.clone(),
        }
    }
}
