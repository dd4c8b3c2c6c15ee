//! Replay buffer and the hindsight relabeler.
//!
//! The relabeler has four independent knobs: which goals to substitute
//! (`future` or `final`), which trajectories to relabel (the played one or
//! paths from the episode's search tree), how many samples to draw, and what
//! policy target the relabeled copies carry. Aggressive rewards, experience
//! ranking and combined replay are optional extras.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::envcore::Environment;
use crate::mcts::{EpisodeNode, EpisodeTree};
use crate::model::TrainBatch;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalStrategy {
    Future,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    Played,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTargetKind {
    MctsProbs,
    OneHot,
    OneHotNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AherConfig {
    pub goal_strategy: GoalStrategy,
    pub trajectory_source: TrajectorySource,
    /// Number of tree trajectories `m` when the source is `tree`.
    pub tree_trajectories: usize,
    /// `k`: copies per transition for `future`, per trajectory for `final`.
    /// Zero disables relabeling.
    pub samples: usize,
    pub policy_target: PolicyTargetKind,
    /// Upper bound of the uniform noise added by `one_hot_noise`.
    pub noise_eta: f64,
    /// Multiplier on the reward of hindsight successes (1 = off).
    pub archer_scale: f64,
    pub ranking: bool,
    pub cer: bool,
    /// Apply `policy_target` to tree trajectories too; otherwise they get
    /// one-hot targets.
    pub tree_targets_follow_kind: bool,
}

impl Default for AherConfig {
    fn default() -> Self {
        AherConfig {
            goal_strategy: GoalStrategy::Future,
            trajectory_source: TrajectorySource::Played,
            tree_trajectories: 3,
            samples: 4,
            policy_target: PolicyTargetKind::MctsProbs,
            noise_eta: 0.1,
            archer_scale: 1.0,
            ranking: false,
            cer: false,
            tree_targets_follow_kind: false,
        }
    }
}

impl AherConfig {
    pub fn validate<E: Environment>(&self, env: &E) -> Result<()> {
        if self.noise_eta < 0.0 || !self.noise_eta.is_finite() {
            return Err(Error::Config(format!("noise_eta must be >= 0, got {}", self.noise_eta)));
        }
        if !(self.archer_scale >= 1.0) || !self.archer_scale.is_finite() {
            return Err(Error::Config(format!("archer_scale must be >= 1, got {}", self.archer_scale)));
        }
        if self.samples > 0 && self.goal_strategy == GoalStrategy::Future && !env.supports_future_goals() {
            return Err(Error::Config(
                "the future goal strategy is not applicable to this environment".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S, G> {
    pub features: Vec<f64>,
    pub state: S,
    pub next_state: S,
    pub desired_goal: G,
    pub action: usize,
    pub reward: f64,
    pub success: bool,
    pub mask: Vec<bool>,
    pub policy_target: Vec<f64>,
    pub value_target: f64,
    pub terminal: bool,
    pub hindsight: bool,
    /// Position of this step within its source trajectory.
    pub step: usize,
    pub insertion_index: u64,
}

/// A finished self-play episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S, G> {
    pub goal: G,
    /// One more state than actions.
    pub states: Vec<S>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub successes: Vec<bool>,
    pub masks: Vec<Vec<bool>>,
    pub search_policies: Vec<Vec<f64>>,
}

impl<S: Clone, G: Clone> Trajectory<S, G> {
    pub fn new(initial: S, goal: G) -> Self {
        Trajectory {
            goal,
            states: vec![initial],
            actions: Vec::new(),
            rewards: Vec::new(),
            successes: Vec::new(),
            masks: Vec::new(),
            search_policies: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn succeeded(&self) -> bool {
        self.successes.last().copied().unwrap_or(false)
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Real transitions with search-policy targets and return-to-go values.
    pub fn transitions<E>(&self, env: &E) -> Vec<Transition<S, G>>
    where
        E: Environment<State = S, Goal = G>,
    {
        let values = value_targets(&self.rewards, env.spec().value_scale);
        (0..self.len())
            .map(|t| Transition {
                features: env.encode(&self.states[t], &self.goal),
                state: self.states[t].clone(),
                next_state: self.states[t + 1].clone(),
                desired_goal: self.goal.clone(),
                action: self.actions[t],
                reward: self.rewards[t],
                success: self.successes[t],
                mask: self.masks[t].clone(),
                policy_target: self.search_policies[t].clone(),
                value_target: values[t],
                terminal: env.is_terminal(&self.states[t + 1]),
                hindsight: false,
                step: t,
                insertion_index: 0,
            })
            .collect()
    }
}

/// Return-to-go `Σ_{u≥t} r_u`, scaled and clipped to `[-1, 1]`.
pub fn value_targets(rewards: &[f64], scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g += rewards[t];
        out[t] = (g * scale).clamp(-1.0, 1.0);
    }
    out
}

/// Builds the training distribution for a relabeled step. Masked entries
/// are always zero.
pub fn make_policy_target(
    kind: PolicyTargetKind,
    action: usize,
    mcts_policy: &[f64],
    mask: &[bool],
    eta: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    if eta < 0.0 {
        return Err(Error::Replay(format!("noise magnitude {eta} is negative")));
    }
    if !mask.get(action).copied().unwrap_or(false) {
        return Err(Error::Replay(format!("action {action} is not legal")));
    }
    let mut out = vec![0.0; mask.len()];
    match kind {
        PolicyTargetKind::MctsProbs => {
            if mcts_policy.len() != mask.len() {
                return Err(Error::Replay("search policy length differs from mask".into()));
            }
            for (o, (&p, &m)) in out.iter_mut().zip(mcts_policy.iter().zip(mask)) {
                *o = if m { p } else { 0.0 };
            }
            let sum: f64 = out.iter().sum();
            if !(sum > 0.0) {
                return Err(Error::Replay("search policy has no legal mass".into()));
            }
            out.iter_mut().for_each(|p| *p /= sum);
        }
        PolicyTargetKind::OneHot => out[action] = 1.0,
        PolicyTargetKind::OneHotNoise => {
            out[action] = 1.0;
            let mut total = 1.0;
            for (o, &m) in out.iter_mut().zip(mask) {
                if m && eta > 0.0 {
                    let u = rng.gen_range(0.0..eta);
                    *o += u;
                    total += u;
                }
            }
            out.iter_mut().for_each(|p| *p /= total);
        }
    }
    Ok(out)
}

/// Path-shaped view shared by played and tree trajectories.
struct Source<'a, S> {
    states: &'a [S],
    actions: &'a [usize],
    masks: &'a [Vec<bool>],
    policies: &'a [Vec<f64>],
    from_tree: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabelOutput<S, G> {
    pub transitions: Vec<Transition<S, G>>,
    /// Requested tree trajectories that could not be supplied.
    pub starvation: usize,
    pub sources: usize,
}

/// Produces hindsight transitions for one finished episode.
///
/// `tree` is required when the source is `tree`. `resample_goals` lets
/// environments with regenerable goals draw a fresh goal for `final`
/// relabeling.
pub fn relabel<E: Environment>(
    env: &E,
    played: &Trajectory<E::State, E::Goal>,
    tree: Option<&EpisodeTree<E::State>>,
    cfg: &AherConfig,
    resample_goals: bool,
    rng: &mut dyn RngCore,
) -> Result<RelabelOutput<E::State, E::Goal>> {
    cfg.validate(env)?;
    let mut out = RelabelOutput {
        transitions: Vec::new(),
        starvation: 0,
        sources: 0,
    };
    if cfg.samples == 0 || played.is_empty() {
        return Ok(out);
    }
    let tree_paths;
    let mut sources: Vec<Source<'_, E::State>> = Vec::new();
    match cfg.trajectory_source {
        TrajectorySource::Played => sources.push(Source {
            states: &played.states,
            actions: &played.actions,
            masks: &played.masks,
            policies: &played.search_policies,
            from_tree: false,
        }),
        TrajectorySource::Tree => {
            let tree = tree.ok_or_else(|| Error::Replay("tree source needs the episode tree".into()))?;
            let m = cfg.tree_trajectories;
            let require_terminal = cfg.goal_strategy == GoalStrategy::Final;
            let accept = |n: &EpisodeNode<E::State>| {
                !require_terminal || env.is_valid_goal(&env.achieved_goal(&n.state))
            };
            let mut eligible = tree.eligible_nodes(require_terminal, accept);
            let chosen: Vec<usize> = if cfg.ranking {
                rank_by_distance(&mut eligible, |&n| {
                    env.goal_distance(&env.achieved_goal(&tree.nodes[n].state), &played.goal)
                });
                eligible.into_iter().take(m).collect()
            } else {
                let mut r = &mut *rng;
                eligible.choose_multiple(&mut r, m).copied().collect()
            };
            out.starvation = m - chosen.len();
            tree_paths = chosen.into_iter().map(|n| tree.trajectory_to(n)).collect::<Vec<_>>();
            for p in &tree_paths {
                sources.push(Source {
                    states: &p.states,
                    actions: &p.actions,
                    masks: &p.masks,
                    policies: &p.visit_policies,
                    from_tree: true,
                });
            }
        }
    }
    out.sources = sources.len();
    for src in &sources {
        match cfg.goal_strategy {
            GoalStrategy::Future => relabel_future(env, src, &played.goal, cfg, rng, &mut out.transitions)?,
            GoalStrategy::Final => relabel_final(env, src, cfg, resample_goals, rng, &mut out.transitions)?,
        }
    }
    Ok(out)
}

/// Stable ascending sort by `key`, so equal distances keep index order.
fn rank_by_distance<T>(items: &mut [T], key: impl Fn(&T) -> f64) {
    items.sort_by(|a, b| key(a).total_cmp(&key(b)));
}

fn relabel_future<E: Environment>(
    env: &E,
    src: &Source<'_, E::State>,
    original: &E::Goal,
    cfg: &AherConfig,
    rng: &mut dyn RngCore,
    out: &mut Vec<Transition<E::State, E::Goal>>,
) -> Result<()> {
    let big_t = src.actions.len();
    let achieved: Vec<E::Goal> = src.states.iter().map(|s| env.achieved_goal(s)).collect();
    for t in 0..big_t {
        let picks: Vec<usize> = if cfg.ranking {
            let mut window: Vec<usize> = (t + 1..=big_t).collect();
            rank_by_distance(&mut window, |&u| env.goal_distance(&achieved[u], original));
            window.into_iter().take(cfg.samples).collect()
        } else {
            (0..cfg.samples).map(|_| rng.gen_range(t + 1..=big_t)).collect()
        };
        for u in picks {
            let goal = achieved[u].clone();
            if !env.is_valid_goal(&goal) {
                continue;
            }
            out.extend(relabeled_step(env, src, t, &goal, cfg, rng)?);
        }
    }
    Ok(())
}

fn relabel_final<E: Environment>(
    env: &E,
    src: &Source<'_, E::State>,
    cfg: &AherConfig,
    resample_goals: bool,
    rng: &mut dyn RngCore,
    out: &mut Vec<Transition<E::State, E::Goal>>,
) -> Result<()> {
    let last = src.states.last().unwrap();
    for _ in 0..cfg.samples {
        let Some(goal) = env.hindsight_goal(last, resample_goals, rng) else {
            return Ok(());
        };
        let states: Vec<E::State> = src.states.iter().map(|s| env.rebind_state(s, &goal)).collect();
        let rebound = Source {
            states: &states,
            actions: src.actions,
            masks: src.masks,
            policies: src.policies,
            from_tree: src.from_tree,
        };
        for t in 0..src.actions.len() {
            out.extend(relabeled_step(env, &rebound, t, &goal, cfg, rng)?);
        }
    }
    Ok(())
}

fn relabeled_step<E: Environment>(
    env: &E,
    src: &Source<'_, E::State>,
    t: usize,
    goal: &E::Goal,
    cfg: &AherConfig,
    rng: &mut dyn RngCore,
) -> Result<Option<Transition<E::State, E::Goal>>> {
    // A state that already achieves the goal is terminal under it.
    let state = env.rebind_state(&src.states[t], goal);
    if env.is_terminal(&state) {
        return Ok(None);
    }
    // Rewards under the new goal from step t until its first success.
    let mut rewards = Vec::new();
    let mut first = None;
    for u in t..src.actions.len() {
        let (r, ok) = env.compute_reward(&env.achieved_goal(&src.states[u + 1]), goal)?;
        rewards.push(if ok { r * cfg.archer_scale } else { r });
        if first.is_none() {
            first = Some((r, ok));
        }
        if ok {
            break;
        }
    }
    let (_, success) = first.unwrap();
    let kind = if src.from_tree && !cfg.tree_targets_follow_kind {
        PolicyTargetKind::OneHot
    } else {
        cfg.policy_target
    };
    let policy_target = make_policy_target(kind, src.actions[t], &src.policies[t], &src.masks[t], cfg.noise_eta, rng)?;
    let value = value_targets(&rewards, env.spec().value_scale)[0];
    Ok(Some(Transition {
        features: env.encode(&state, goal),
        next_state: env.rebind_state(&src.states[t + 1], goal),
        state,
        desired_goal: goal.clone(),
        action: src.actions[t],
        reward: rewards[0],
        success,
        mask: src.masks[t].clone(),
        policy_target,
        value_target: value,
        terminal: success,
        hindsight: true,
        step: t,
        insertion_index: 0,
    }))
}

/// Bounded FIFO store of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<S, G> {
    capacity: usize,
    items: VecDeque<Transition<S, G>>,
    next_index: u64,
    stored_hindsight: usize,
    pub real_insertions: u64,
    pub hindsight_insertions: u64,
}

impl<S: Clone, G: Clone> ReplayBuffer<S, G> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Replay("capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::new(),
            next_index: 0,
            stored_hindsight: 0,
            real_insertions: 0,
            hindsight_insertions: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<S, G>> {
        self.items.iter()
    }

    fn check(t: &Transition<S, G>) -> Result<()> {
        if t.policy_target.len() != t.mask.len() {
            return Err(Error::Replay("policy target length differs from mask".into()));
        }
        let mut sum = 0.0;
        for (&p, &m) in t.policy_target.iter().zip(&t.mask) {
            if p < 0.0 || (!m && p != 0.0) {
                return Err(Error::Replay("policy target puts mass on an illegal action".into()));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Replay(format!("policy target sums to {sum}")));
        }
        if !(-1.0..=1.0).contains(&t.value_target) {
            return Err(Error::Replay(format!("value target {} outside [-1, 1]", t.value_target)));
        }
        Ok(())
    }

    fn insert(&mut self, mut t: Transition<S, G>) {
        t.insertion_index = self.next_index;
        self.next_index += 1;
        if t.hindsight {
            self.stored_hindsight += 1;
            self.hindsight_insertions += 1;
        } else {
            self.real_insertions += 1;
        }
        if self.items.len() == self.capacity {
            if let Some(old) = self.items.pop_front() {
                if old.hindsight {
                    self.stored_hindsight -= 1;
                }
            }
        }
        self.items.push_back(t);
    }

    /// Appends transitions in order, forcing the given hindsight flag. The
    /// whole batch is validated before anything is inserted.
    fn push_all(&mut self, transitions: Vec<Transition<S, G>>, hindsight: bool) -> Result<()> {
        for t in &transitions {
            Self::check(t)?;
        }
        for mut t in transitions {
            t.hindsight = hindsight;
            self.insert(t);
        }
        Ok(())
    }

    pub fn push_episode(&mut self, transitions: Vec<Transition<S, G>>) -> Result<()> {
        self.push_all(transitions, false)
    }

    pub fn push_hindsight(&mut self, transitions: Vec<Transition<S, G>>) -> Result<()> {
        self.push_all(transitions, true)
    }

    pub fn hindsight_ratio(&self) -> Result<f64> {
        if self.items.is_empty() {
            return Err(Error::Replay("hindsight ratio of an empty buffer".into()));
        }
        Ok(self.stored_hindsight as f64 / self.items.len() as f64)
    }

    /// Indices drawn uniformly with replacement; with `cer` the newest
    /// transition comes first.
    pub fn sample_indices(&self, batch_size: usize, cer: bool, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Replay("sampling from an empty buffer".into()));
        }
        let n = self.items.len();
        let mut idx = Vec::with_capacity(batch_size);
        if cer && batch_size > 0 {
            idx.push(n - 1);
        }
        while idx.len() < batch_size {
            idx.push(rng.gen_range(0..n));
        }
        Ok(idx)
    }

    pub fn sample_batch(&self, batch_size: usize, cer: bool, rng: &mut dyn RngCore) -> Result<TrainBatch> {
        let idx = self.sample_indices(batch_size, cer, rng)?;
        let first = &self.items[idx[0]];
        let mut batch = TrainBatch::new(first.features.len(), first.mask.len());
        for i in idx {
            let t = &self.items[i];
            batch.push(&t.features, &t.policy_target, t.value_target, &t.mask);
        }
        Ok(batch)
    }
}
