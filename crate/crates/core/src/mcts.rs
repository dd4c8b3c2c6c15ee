//! Single-player PUCT search and the per-episode retained tree.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::envcore::Environment;
use crate::model::NetParams;
use crate::{Error, Result};

/// Policy/value oracle queried at every expansion. Must be safe for
/// concurrent read-only use.
pub trait Evaluator: Sync {
    fn evaluate(&self, features: &[f64], mask: &[bool]) -> Result<(Vec<f64>, f64)>;
}

impl Evaluator for NetParams {
    fn evaluate(&self, features: &[f64], mask: &[bool]) -> Result<(Vec<f64>, f64)> {
        let out = self.forward(features, mask, None)?;
        Ok((out.policy, out.value))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsParams {
    pub simulations: usize,
    pub c_puct: f64,
    pub root_noise: bool,
    /// Dirichlet concentration; `None` means `10 / action_count`.
    pub dirichlet_alpha: Option<f64>,
    pub noise_weight: f64,
}

impl Default for MctsParams {
    fn default() -> Self {
        MctsParams {
            simulations: 50,
            c_puct: 1.25,
            root_noise: true,
            dirichlet_alpha: None,
            noise_weight: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode<S> {
    pub state: S,
    /// `(parent index, action)`; `None` at the root.
    pub parent: Option<(usize, usize)>,
    /// Reward collected on the edge into this node.
    pub reward: f64,
    pub terminal: bool,
    pub success: bool,
    pub mask: Vec<bool>,
    pub prior: Vec<f64>,
    pub children: Vec<Option<usize>>,
    pub child_visits: Vec<u32>,
    pub child_value: Vec<f64>,
    pub visits: u32,
    /// Evaluator (or terminal) value assigned at expansion.
    pub value: f64,
}

impl<S> SearchNode<S> {
    pub fn q(&self, a: usize) -> f64 {
        if self.child_visits[a] == 0 {
            0.0
        } else {
            self.child_value[a] / self.child_visits[a] as f64
        }
    }
}

/// Arena-allocated search tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree<S> {
    pub nodes: Vec<SearchNode<S>>,
}

impl<S> SearchTree<S> {
    pub fn root(&self) -> &SearchNode<S> {
        &self.nodes[0]
    }

    /// Actions leading from the root to `node`.
    pub fn path_to(&self, mut node: usize) -> Vec<usize> {
        let mut path = Vec::new();
        while let Some((p, a)) = self.nodes[node].parent {
            path.push(a);
            node = p;
        }
        path.reverse();
        path
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<S> {
    pub visit_counts: Vec<u32>,
    /// Visit-count policy at temperature 1.
    pub policy: Vec<f64>,
    pub root_value: f64,
    pub expanded_node_count: usize,
    /// 1-based expansion index at which a successful terminal node first
    /// appeared.
    pub first_success_expansion: Option<usize>,
    pub tree: SearchTree<S>,
}

/// PUCT score maximiser over legal actions; ties go to the lowest index.
pub fn puct_select(
    prior: &[f64],
    child_visits: &[u32],
    child_value: &[f64],
    mask: &[bool],
    node_visits: u32,
    c_puct: f64,
) -> Option<usize> {
    let sqrt_n = (node_visits as f64).sqrt();
    let mut best: Option<(usize, f64)> = None;
    for a in 0..prior.len() {
        if !mask[a] {
            continue;
        }
        let n = child_visits[a];
        let q = if n == 0 { 0.0 } else { child_value[a] / n as f64 };
        let score = q + c_puct * prior[a] * sqrt_n / (1.0 + n as f64);
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((a, score));
        }
    }
    best.map(|(a, _)| a)
}

fn renormalize(prior: &mut [f64], mask: &[bool]) -> Result<()> {
    for (p, &m) in prior.iter_mut().zip(mask) {
        if !m || !p.is_finite() || *p < 0.0 {
            *p = 0.0;
        }
    }
    let sum: f64 = prior.iter().sum();
    if sum > 0.0 {
        prior.iter_mut().for_each(|p| *p /= sum);
    } else {
        let legal = mask.iter().filter(|&&m| m).count();
        if legal == 0 {
            return Err(Error::Search("node without legal actions".into()));
        }
        for (p, &m) in prior.iter_mut().zip(mask) {
            *p = if m { 1.0 / legal as f64 } else { 0.0 };
        }
    }
    Ok(())
}

fn add_dirichlet(prior: &mut [f64], mask: &[bool], alpha: f64, weight: f64, rng: &mut dyn RngCore) -> Result<()> {
    let legal: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
    if legal.len() < 2 || weight == 0.0 {
        return Ok(());
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Search(format!("dirichlet alpha {alpha}: {e}")))?;
    let draws: Vec<f64> = legal.iter().map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if !(sum > 0.0) {
        return Ok(());
    }
    for (&a, d) in legal.iter().zip(draws) {
        prior[a] = (1.0 - weight) * prior[a] + weight * d / sum;
    }
    Ok(())
}

struct Search<'a, E: Environment, V: Evaluator + ?Sized> {
    env: &'a E,
    eval: &'a V,
    goal: &'a E::Goal,
    scale: f64,
    tree: SearchTree<E::State>,
    first_success: Option<usize>,
}

impl<E: Environment, V: Evaluator + ?Sized> Search<'_, E, V> {
    fn expand(&mut self, state: E::State, parent: Option<(usize, usize)>, reward: f64, success: bool) -> Result<usize> {
        let actions = self.env.spec().action_count;
        let terminal = self.env.is_terminal(&state);
        let (mask, prior, value) = if terminal {
            (vec![false; actions], vec![0.0; actions], self.env.terminal_value(&state))
        } else {
            let mask = self.env.legal_actions(&state)?;
            let (mut prior, value) = self.eval.evaluate(&self.env.encode(&state, self.goal), &mask)?;
            if prior.len() != actions {
                return Err(Error::Search(format!(
                    "evaluator returned {} priors for {actions} actions",
                    prior.len()
                )));
            }
            renormalize(&mut prior, &mask)?;
            (mask, prior, value.clamp(-1.0, 1.0))
        };
        self.tree.nodes.push(SearchNode {
            state,
            parent,
            reward,
            terminal,
            success,
            mask,
            prior,
            children: vec![None; actions],
            child_visits: vec![0; actions],
            child_value: vec![0.0; actions],
            visits: 1,
            value,
        });
        let id = self.tree.nodes.len() - 1;
        if success && self.first_success.is_none() {
            self.first_success = Some(id + 1);
        }
        if let Some((p, a)) = parent {
            self.tree.nodes[p].children[a] = Some(id);
        }
        Ok(id)
    }

    fn simulate(&mut self, c_puct: f64) -> Result<()> {
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut node = 0;
        let leaf_value = loop {
            let n = &self.tree.nodes[node];
            if n.terminal {
                // A terminal leaf reached again; count the visit.
                self.tree.nodes[node].visits += 1;
                break self.tree.nodes[node].value;
            }
            let a = puct_select(&n.prior, &n.child_visits, &n.child_value, &n.mask, n.visits, c_puct)
                .ok_or_else(|| Error::Search("no selectable action".into()))?;
            path.push((node, a));
            match n.children[a] {
                Some(c) => node = c,
                None => {
                    let step = self.env.step(&n.state, self.goal, a)?;
                    let child = self.expand(step.observation.state, Some((node, a)), step.reward, step.success)?;
                    break self.tree.nodes[child].value;
                }
            }
        };
        let mut g = leaf_value;
        for &(p, a) in path.iter().rev() {
            let child = self.tree.nodes[p].children[a].unwrap();
            g += self.scale * self.tree.nodes[child].reward;
            let n = &mut self.tree.nodes[p];
            n.child_visits[a] += 1;
            n.child_value[a] += g;
            n.visits += 1;
        }
        Ok(())
    }
}

/// Runs `params.simulations` PUCT simulations from `root`. The root is
/// expanded first, so one simulation visits exactly one child. Stops early
/// once `expansion_budget` unique nodes have been expanded.
pub fn search<E: Environment, V: Evaluator + ?Sized>(
    env: &E,
    root: &E::State,
    goal: &E::Goal,
    evaluator: &V,
    params: &MctsParams,
    expansion_budget: Option<usize>,
    rng: &mut dyn RngCore,
) -> Result<SearchResult<E::State>> {
    if env.is_terminal(root) {
        return Err(Error::Search("search from a terminal state".into()));
    }
    if params.simulations == 0 {
        return Err(Error::Search("simulations must be positive".into()));
    }
    let actions = env.spec().action_count;
    let mut s = Search {
        env,
        eval: evaluator,
        goal,
        scale: env.spec().value_scale,
        tree: SearchTree { nodes: Vec::new() },
        first_success: None,
    };
    s.expand(root.clone(), None, 0.0, false)?;
    if params.root_noise {
        let alpha = params.dirichlet_alpha.unwrap_or(10.0 / actions as f64);
        let root = &mut s.tree.nodes[0];
        add_dirichlet(&mut root.prior, &root.mask, alpha, params.noise_weight, rng)?;
    }
    for _ in 0..params.simulations {
        if expansion_budget.is_some_and(|b| s.tree.nodes.len() >= b) {
            break;
        }
        s.simulate(params.c_puct)?;
    }
    let root = s.tree.root();
    let visit_counts = root.child_visits.clone();
    let policy = extract_policy(&visit_counts, 1.0);
    let root_value = (root.value + root.child_value.iter().sum::<f64>()) / root.visits as f64;
    Ok(SearchResult {
        visit_counts,
        policy,
        root_value,
        expanded_node_count: s.tree.nodes.len(),
        first_success_expansion: s.first_success,
        tree: s.tree,
    })
}

/// `π(a) ∝ N(a)^(1/τ)`; `τ = 0` is one-hot at the most visited action with
/// ties broken towards the lowest index. All-zero counts give a uniform
/// distribution.
pub fn extract_policy(visits: &[u32], tau: f64) -> Vec<f64> {
    let n = visits.len();
    let max = visits.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![1.0 / n as f64; n];
    }
    if tau <= 0.0 {
        let best = visits.iter().position(|&v| v == max).unwrap();
        let mut out = vec![0.0; n];
        out[best] = 1.0;
        return out;
    }
    let w: Vec<f64> = visits
        .iter()
        .map(|&v| if v == 0 { 0.0 } else { (v as f64 / max as f64).powf(1.0 / tau) })
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

/// Inverse-CDF sample from a probability vector.
pub fn sample_action(policy: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &p) in policy.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeNode<S> {
    pub state: S,
    pub parent: Option<(usize, usize)>,
    pub depth: usize,
    pub terminal: bool,
    pub success: bool,
    pub mask: Vec<bool>,
    pub children: Vec<Option<usize>>,
    /// Child visit counts summed over every search that contained this node.
    pub child_visits: Vec<u64>,
    pub on_played_path: bool,
}

/// Union of all per-move search trees of one episode, keyed by the action
/// path from the episode's initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTree<S> {
    pub nodes: Vec<EpisodeNode<S>>,
    index: HashMap<Vec<usize>, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeTrajectory<S> {
    /// `states[i]` precedes `actions[i]`; one more state than actions.
    pub states: Vec<S>,
    pub actions: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    /// Normalised child-visit distribution at each state along the path.
    pub visit_policies: Vec<Vec<f64>>,
    pub terminal_leaf: bool,
}

impl<S: Clone> EpisodeTree<S> {
    pub fn new(initial: S, mask: Vec<bool>) -> Self {
        let actions = mask.len();
        let mut index = HashMap::new();
        index.insert(Vec::new(), 0);
        EpisodeTree {
            nodes: vec![EpisodeNode {
                state: initial,
                parent: None,
                depth: 0,
                terminal: false,
                success: false,
                mask,
                children: vec![None; actions],
                child_visits: vec![0; actions],
                on_played_path: true,
            }],
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_at(&self, path: &[usize]) -> Option<usize> {
        self.index.get(path).copied()
    }

    fn insert(&mut self, path: Vec<usize>, node: &SearchNode<S>) -> usize {
        if let Some(&id) = self.index.get(&path) {
            return id;
        }
        let (parent_path, a) = (path[..path.len() - 1].to_vec(), path[path.len() - 1]);
        let parent = self.index[&parent_path];
        let actions = node.children.len();
        self.nodes.push(EpisodeNode {
            state: node.state.clone(),
            parent: Some((parent, a)),
            depth: path.len(),
            terminal: node.terminal,
            success: node.success,
            mask: node.mask.clone(),
            children: vec![None; actions],
            child_visits: vec![0; actions],
            on_played_path: false,
        });
        let id = self.nodes.len() - 1;
        self.nodes[parent].children[a] = Some(id);
        self.index.insert(path, id);
        id
    }

    /// Merges a search rooted at the state reached by `prefix`.
    pub fn merge(&mut self, prefix: &[usize], tree: &SearchTree<S>) -> Result<()> {
        if !self.index.contains_key(prefix) {
            return Err(Error::Search("merge prefix not in episode tree".into()));
        }
        // Parents precede children in the arena, so a single pass suffices.
        let mut paths: Vec<Vec<usize>> = Vec::with_capacity(tree.nodes.len());
        for (i, node) in tree.nodes.iter().enumerate() {
            let path = match node.parent {
                None => prefix.to_vec(),
                Some((p, a)) => {
                    let mut path = paths[p].clone();
                    path.push(a);
                    path
                }
            };
            let id = self.insert(path.clone(), node);
            let dst = &mut self.nodes[id];
            for (v, &n) in dst.child_visits.iter_mut().zip(&tree.nodes[i].child_visits) {
                *v += n as u64;
            }
            paths.push(path);
        }
        Ok(())
    }

    /// Flags the nodes along the played action sequence.
    pub fn mark_played(&mut self, actions: &[usize]) {
        let mut node = 0;
        self.nodes[0].on_played_path = true;
        for &a in actions {
            match self.nodes[node].children[a] {
                Some(c) => {
                    self.nodes[c].on_played_path = true;
                    node = c;
                }
                None => break,
            }
        }
    }

    /// Off-path nodes at depth ≥ 1 that pass `require_terminal_leaf` and
    /// `accept`.
    pub fn eligible_nodes(&self, require_terminal_leaf: bool, accept: impl Fn(&EpisodeNode<S>) -> bool) -> Vec<usize> {
        (1..self.nodes.len())
            .filter(|&i| {
                let n = &self.nodes[i];
                !n.on_played_path && (!require_terminal_leaf || n.terminal) && accept(n)
            })
            .collect()
    }

    pub fn trajectory_to(&self, node: usize) -> TreeTrajectory<S> {
        let mut chain = vec![node];
        let mut cur = node;
        while let Some((p, _)) = self.nodes[cur].parent {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        let mut t = TreeTrajectory {
            states: chain.iter().map(|&i| self.nodes[i].state.clone()).collect(),
            actions: Vec::new(),
            masks: Vec::new(),
            visit_policies: Vec::new(),
            terminal_leaf: self.nodes[node].terminal,
        };
        for w in chain.windows(2) {
            let (p, a) = self.nodes[w[1]].parent.unwrap();
            debug_assert_eq!(p, w[0]);
            let n = &self.nodes[p];
            let total: u64 = n.child_visits.iter().sum();
            let visits = if total == 0 {
                let mut v = vec![0.0; n.child_visits.len()];
                v[a] = 1.0;
                v
            } else {
                n.child_visits.iter().map(|&c| c as f64 / total as f64).collect()
            };
            t.actions.push(a);
            t.masks.push(n.mask.clone());
            t.visit_policies.push(visits);
        }
        t
    }
}

/// Up to `m` root-to-node paths ending at distinct eligible nodes, drawn
/// uniformly without replacement.
pub fn sample_tree_trajectories<S: Clone>(
    tree: &EpisodeTree<S>,
    m: usize,
    require_terminal_leaf: bool,
    rng: &mut dyn RngCore,
) -> Vec<TreeTrajectory<S>> {
    sample_tree_trajectories_where(tree, m, require_terminal_leaf, rng, |_| true)
}

pub fn sample_tree_trajectories_where<S: Clone>(
    tree: &EpisodeTree<S>,
    m: usize,
    require_terminal_leaf: bool,
    rng: &mut dyn RngCore,
    accept: impl Fn(&EpisodeNode<S>) -> bool,
) -> Vec<TreeTrajectory<S>> {
    if m == 0 {
        return Vec::new();
    }
    let eligible = tree.eligible_nodes(require_terminal_leaf, accept);
    let mut rng = rng;
    eligible
        .choose_multiple(&mut rng, m)
        .map(|&n| tree.trajectory_to(n))
        .collect()
}

/// Structural check of every node invariant; returns the first violation.
pub fn validate_tree<S>(tree: &SearchTree<S>) -> std::result::Result<(), String> {
    for (i, n) in tree.nodes.iter().enumerate() {
        if !n.terminal {
            let psum: f64 = n.prior.iter().sum();
            if (psum - 1.0).abs() > 1e-6 {
                return Err(format!("node {i}: priors sum to {psum}"));
            }
            let total: u32 = n.child_visits.iter().sum();
            if n.visits != total + 1 {
                return Err(format!("node {i}: N(s) {} vs sum {} + 1", n.visits, total));
            }
        }
        for a in 0..n.children.len() {
            if !n.mask.get(a).copied().unwrap_or(false) {
                if n.prior[a] != 0.0 || n.child_visits[a] != 0 || n.children[a].is_some() {
                    return Err(format!("node {i}: illegal action {a} has statistics"));
                }
            }
            if n.q(a) * n.child_visits[a] as f64 != n.child_value[a] && n.child_visits[a] > 0 {
                let diff = (n.q(a) * n.child_visits[a] as f64 - n.child_value[a]).abs();
                if diff > 1e-12 * n.child_value[a].abs().max(1.0) {
                    return Err(format!("node {i}: Q·N differs from W for action {a}"));
                }
            }
            if let Some(c) = n.children[a] {
                if tree.nodes[c].parent != Some((i, a)) {
                    return Err(format!("node {c}: wrong parent link"));
                }
                if n.child_visits[a] == 0 {
                    return Err(format!("node {i}: expanded child {a} never visited"));
                }
            }
        }
    }
    Ok(())
}
