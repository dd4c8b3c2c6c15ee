//! Self-play → relabel → train loop, the supervised baseline for equation
//! discovery, greedy evaluation and run outputs.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, iteration,
//! episode)`, so results are independent of how self-play episodes are
//! spread over worker threads.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AnyEnv, Mode, RunConfig};
use crate::envcore::Environment;
use crate::environments::{EqGoal, EquationDiscovery};
use crate::mcts::{extract_policy, sample_action, search, EpisodeTree, MctsParams};
use crate::model::{Adam, Architecture, LossParts, NetParams, TrainBatch};
use crate::replay::{relabel, ReplayBuffer, Trajectory, TrajectorySource, Transition};
use crate::stats::{mean, median};
use crate::{Error, Result};

pub use crate::replay::value_targets;

const INIT: u64 = 1;
const PLAY: u64 = 2;
const TRAIN: u64 = 3;
const EVAL: u64 = 4;
const DISCOVERY: u64 = 5;
const SL_DATA: u64 = 6;

/// Independent random stream for one purpose of one run.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    // SplitMix64 finaliser folded over the key parts.
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub hindsight_ratio: f64,
    pub starvation_count: usize,
    pub expanded_nodes: usize,
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRecord {
    pub target_id: String,
    pub seed: u64,
    pub nodes_expanded: usize,
    pub found: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoverySummary {
    /// Costs per target id, failures charged at the failure cost.
    pub per_target: BTreeMap<String, Vec<f64>>,
    pub mean: f64,
    pub median: f64,
}

/// First iteration index whose success rate reaches `threshold`.
pub fn iterations_to_threshold(series: &[f64], threshold: f64) -> Result<Option<usize>> {
    if series.is_empty() {
        return Err(Error::Runtime("empty metrics series".into()));
    }
    Ok(series.iter().position(|&s| s >= threshold))
}

pub fn discovery_cost(r: &DiscoveryRecord, failure_cost: f64) -> f64 {
    if r.found {
        r.nodes_expanded as f64
    } else {
        failure_cost
    }
}

pub fn discovery_aggregate(records: &[DiscoveryRecord], failure_cost: f64) -> Result<DiscoverySummary> {
    if records.is_empty() {
        return Err(Error::Runtime("no discovery records".into()));
    }
    let costs: Vec<f64> = records.iter().map(|r| discovery_cost(r, failure_cost)).collect();
    let mut per_target: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (r, &c) in records.iter().zip(&costs) {
        per_target.entry(r.target_id.clone()).or_default().push(c);
    }
    Ok(DiscoverySummary {
        per_target,
        mean: mean(&costs).unwrap(),
        median: median(&costs).unwrap(),
    })
}

/// What one self-play episode contributes to the buffer and metrics.
#[derive(Debug, Clone)]
pub struct EpisodeOutput<S, G> {
    pub real: Vec<Transition<S, G>>,
    pub hindsight: Vec<Transition<S, G>>,
    pub starvation: usize,
    pub expanded: usize,
    pub success: bool,
    pub total_return: f64,
}

pub struct Trainer<E: Environment> {
    pub env: E,
    pub cfg: RunConfig,
    pub params: NetParams,
    pub opt: Adam,
    pub buffer: ReplayBuffer<E::State, E::Goal>,
    mcts: MctsParams,
    iteration: usize,
    /// Fixed per-target datasets for supervised training without dataset
    /// changes.
    sl_data: Option<Vec<crate::grammar::Dataset>>,
}

impl<E: Environment> Trainer<E> {
    pub fn new(env: E, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.aher.validate(&env).or_else(|e| {
            // The relabeler is idle outside rl_aher, so its checks do not apply.
            if cfg.mode == Mode::RlAher {
                Err(e)
            } else {
                Ok(())
            }
        })?;
        let spec = env.spec().clone();
        let arch = Architecture {
            input: spec.feature_dim,
            hidden: cfg.model.hidden.clone(),
            actions: spec.action_count,
            dropout: cfg.model.dropout,
        };
        let params = NetParams::init(&arch, &mut stream(cfg.seed, &[INIT]))?;
        let opt = Adam::new(params.len(), cfg.model.adam());
        let buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
        let mcts = cfg.mcts_params();
        Ok(Trainer {
            env,
            cfg,
            params,
            opt,
            buffer,
            mcts,
            iteration: 0,
            sl_data: None,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn relabel_on(&self) -> bool {
        self.cfg.mode == Mode::RlAher && self.cfg.aher.samples > 0
    }

    fn temperature(&self, t: usize) -> f64 {
        if (t as f64) < self.cfg.temperature_cutoff * self.env.spec().horizon as f64 {
            1.0
        } else {
            0.0
        }
    }

    /// Plays one episode from `initial` with exploration (root noise,
    /// temperature schedule) and returns the trajectory, the merged tree if
    /// requested and the number of expanded nodes.
    pub fn play(
        &self,
        initial: E::State,
        goal: E::Goal,
        keep_tree: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Trajectory<E::State, E::Goal>, Option<EpisodeTree<E::State>>, usize)> {
        let mut traj = Trajectory::new(initial.clone(), goal.clone());
        let mut tree = if keep_tree {
            Some(EpisodeTree::new(initial.clone(), self.env.legal_actions(&initial)?))
        } else {
            None
        };
        let mut state = initial;
        let mut expanded = 0;
        while !self.env.is_terminal(&state) {
            let r = search(&self.env, &state, &goal, &self.params, &self.mcts, None, rng)?;
            expanded += r.expanded_node_count;
            if let Some(t) = tree.as_mut() {
                t.merge(&traj.actions, &r.tree)?;
            }
            let pi = extract_policy(&r.visit_counts, self.temperature(traj.len()));
            let a = sample_action(&pi, rng);
            let step = self.env.step(&state, &goal, a)?;
            traj.masks.push(r.tree.root().mask.clone());
            traj.search_policies.push(r.policy);
            traj.actions.push(a);
            traj.rewards.push(step.reward);
            traj.successes.push(step.success);
            state = step.observation.state;
            traj.states.push(state.clone());
        }
        if let Some(t) = tree.as_mut() {
            t.mark_played(&traj.actions);
        }
        Ok((traj, tree, expanded))
    }

    fn self_play_episode(&self, iteration: usize, episode: usize) -> Result<EpisodeOutput<E::State, E::Goal>> {
        let mut rng = stream(self.cfg.seed, &[PLAY, iteration as u64, episode as u64]);
        let obs = self.env.reset(&mut rng, None)?;
        let keep_tree = self.relabel_on() && self.cfg.aher.trajectory_source == TrajectorySource::Tree;
        let (traj, tree, expanded) = self.play(obs.state, obs.desired_goal, keep_tree, &mut rng)?;
        let (hindsight, starvation) = if self.relabel_on() {
            let out = relabel(&self.env, &traj, tree.as_ref(), &self.cfg.aher, self.cfg.dataset_change, &mut rng)?;
            (out.transitions, out.starvation)
        } else {
            (Vec::new(), 0)
        };
        Ok(EpisodeOutput {
            real: traj.transitions(&self.env),
            hindsight,
            starvation,
            expanded,
            success: traj.succeeded(),
            total_return: traj.total_return(),
        })
    }

    /// Self-play episodes of one iteration, in episode order regardless of
    /// the worker count.
    pub fn self_play(&self, iteration: usize) -> Result<Vec<EpisodeOutput<E::State, E::Goal>>> {
        let n = self.cfg.episodes_per_iteration;
        let workers = self.cfg.workers.min(n.max(1));
        if workers <= 1 {
            return (0..n).map(|e| self.self_play_episode(iteration, e)).collect();
        }
        let results: Vec<Result<Vec<(usize, EpisodeOutput<E::State, E::Goal>)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    s.spawn(move || {
                        (w..n)
                            .step_by(workers)
                            .map(|e| self.self_play_episode(iteration, e).map(|o| (e, o)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Runtime("self-play worker panicked".into()))))
                .collect()
        });
        let mut all = Vec::with_capacity(n);
        for r in results {
            all.extend(r?);
        }
        all.sort_by_key(|(e, _)| *e);
        Ok(all.into_iter().map(|(_, o)| o).collect())
    }

    /// Runs `steps` optimizer steps on batches from the buffer and returns
    /// the mean loss components (NaN when nothing was trained).
    pub fn train(&mut self, steps: usize, rng: &mut dyn RngCore) -> Result<LossParts> {
        if steps == 0 || self.buffer.is_empty() {
            return Ok(LossParts {
                total: f64::NAN,
                policy: f64::NAN,
                value: f64::NAN,
                regularization: f64::NAN,
            });
        }
        let mut sum = LossParts::default();
        for _ in 0..steps {
            let batch = self.buffer.sample_batch(self.cfg.batch_size, self.cfg.aher.cer && self.relabel_on(), rng)?;
            let loss = self.step_on(&batch, rng)?;
            sum.total += loss.total;
            sum.policy += loss.policy;
            sum.value += loss.value;
            sum.regularization += loss.regularization;
        }
        let n = steps as f64;
        Ok(LossParts {
            total: sum.total / n,
            policy: sum.policy / n,
            value: sum.value / n,
            regularization: sum.regularization / n,
        })
    }

    fn step_on(&mut self, batch: &TrainBatch, rng: &mut dyn RngCore) -> Result<LossParts> {
        let (g, loss) = self.params.grad(batch, self.cfg.model.l2, rng)?;
        if !loss.total.is_finite() {
            return Err(Error::Model(format!("non-finite loss {}", loss.total)));
        }
        self.opt.step(&mut self.params, &g)?;
        Ok(loss)
    }

    /// Greedy episodes: no root noise, temperature 0, no dropout. Never
    /// touches the buffer or the parameters.
    pub fn evaluate(&self, iteration: usize) -> Result<(f64, f64)> {
        let params = MctsParams {
            root_noise: false,
            ..self.mcts.clone()
        };
        let mut successes = 0;
        let mut returns = 0.0;
        for ep in 0..self.cfg.eval_episodes {
            let mut rng = stream(self.cfg.seed, &[EVAL, iteration as u64, ep as u64]);
            let obs = self.env.reset(&mut rng, None)?;
            let goal = obs.desired_goal;
            let mut state = obs.state;
            let mut success = false;
            while !self.env.is_terminal(&state) {
                let r = search(&self.env, &state, &goal, &self.params, &params, None, &mut rng)?;
                let a = extract_policy(&r.visit_counts, 0.0)
                    .iter()
                    .position(|&p| p == 1.0)
                    .unwrap();
                let step = self.env.step(&state, &goal, a)?;
                returns += step.reward;
                success = step.success;
                state = step.observation.state;
            }
            successes += usize::from(success);
        }
        let n = self.cfg.eval_episodes as f64;
        Ok((successes as f64 / n, returns / n))
    }

    /// One self-play → relabel → train → evaluate cycle.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics> {
        let start = Instant::now();
        let it = self.iteration;
        let episodes = self.self_play(it)?;
        let mut starvation = 0;
        let mut expanded = 0;
        for ep in episodes {
            starvation += ep.starvation;
            expanded += ep.expanded;
            self.buffer.push_episode(ep.real)?;
            self.buffer.push_hindsight(ep.hindsight)?;
        }
        let mut rng = stream(self.cfg.seed, &[TRAIN, it as u64]);
        let loss = self.train(self.cfg.train_steps_per_iteration, &mut rng)?;
        let (success_rate, mean_return) = self.evaluate(it)?;
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: it,
            success_rate,
            mean_return,
            hindsight_ratio: self.buffer.hindsight_ratio().unwrap_or(0.0),
            starvation_count: starvation,
            expanded_nodes: expanded,
            loss_total: loss.total,
            loss_policy: loss.policy,
            loss_value: loss.value,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

impl Trainer<EquationDiscovery> {
    /// Supervised pairs along each target's ground-truth derivation: the
    /// state before every rule, the one-hot rule, value 1.
    pub fn supervised_batch(&mut self, rng: &mut dyn RngCore) -> Result<TrainBatch> {
        let change = self.cfg.mode == Mode::SlDc;
        if !change && self.sl_data.is_none() {
            let data = (0..self.env.targets().len())
                .map(|i| self.env.target_dataset(i, &mut stream(self.cfg.seed, &[SL_DATA, i as u64])))
                .collect::<Result<Vec<_>>>()?;
            self.sl_data = Some(data);
        }
        let spec = self.env.spec().clone();
        let mut batch = TrainBatch::new(spec.feature_dim, spec.action_count);
        for (i, target) in self.env.targets().iter().enumerate() {
            let data = if change {
                self.env.target_dataset(i, rng)?
            } else {
                self.sl_data.as_ref().unwrap()[i].clone()
            };
            let goal = EqGoal::Data(data.clone());
            let states = self.env.replay(&data, &target.rules)?;
            for (s, &rule) in states.iter().zip(&target.rules) {
                let mut pi = vec![0.0; spec.action_count];
                pi[rule] = 1.0;
                batch.push(&self.env.encode(s, &goal), &pi, 1.0, &self.env.legal_actions(s)?);
            }
        }
        Ok(batch)
    }

    /// One supervised training iteration followed by greedy evaluation.
    pub fn run_sl_iteration(&mut self) -> Result<IterationMetrics> {
        if !self.cfg.mode.is_supervised() {
            return Err(Error::Config("supervised iteration outside sl/sl_dc mode".into()));
        }
        let start = Instant::now();
        let it = self.iteration;
        let mut rng = stream(self.cfg.seed, &[TRAIN, it as u64]);
        let mut sum = LossParts::default();
        let steps = self.cfg.train_steps_per_iteration;
        for _ in 0..steps {
            let batch = self.supervised_batch(&mut rng)?;
            let loss = self.step_on(&batch, &mut rng)?;
            sum.total += loss.total;
            sum.policy += loss.policy;
            sum.value += loss.value;
        }
        let n = steps as f64;
        let (success_rate, mean_return) = self.evaluate(it)?;
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: it,
            success_rate,
            mean_return,
            hindsight_ratio: 0.0,
            starvation_count: 0,
            expanded_nodes: 0,
            loss_total: sum.total / n,
            loss_policy: sum.policy / n,
            loss_value: sum.value / n,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Searches for every target with the current network until a search
    /// expands a node that fits the target's dataset, or the node budget
    /// runs out. Counts sum `expanded_node_count` over all searches of the
    /// cell, up to and including the successful expansion.
    pub fn discover(&self) -> Result<Vec<DiscoveryRecord>> {
        let budget = self.cfg.discovery.budget;
        let mut records = Vec::new();
        for (i, target) in self.env.targets().iter().enumerate() {
            let mut rng = stream(self.cfg.seed, &[DISCOVERY, i as u64]);
            let data = self.env.target_dataset(i, &mut rng)?;
            let goal = EqGoal::Data(data.clone());
            let mut count = 0;
            let mut found = false;
            'cell: while count < budget {
                let mut state = self.env.initial_state(&data);
                let mut t = 0;
                while !self.env.is_terminal(&state) {
                    let r = search(&self.env, &state, &goal, &self.params, &self.mcts, Some(budget - count), &mut rng)?;
                    if let Some(k) = r.first_success_expansion {
                        count += k;
                        found = true;
                        break 'cell;
                    }
                    count += r.expanded_node_count;
                    if count >= budget {
                        break 'cell;
                    }
                    let a = sample_action(&extract_policy(&r.visit_counts, self.temperature(t)), &mut rng);
                    state = self.env.step(&state, &goal, a)?.observation.state;
                    t += 1;
                }
            }
            records.push(DiscoveryRecord {
                target_id: target.id.clone(),
                seed: self.cfg.seed,
                nodes_expanded: count.min(budget),
                found,
            });
        }
        Ok(records)
    }
}

pub const METRICS_HEADER: [&str; 10] = [
    "iteration",
    "success_rate",
    "mean_return",
    "hindsight_ratio",
    "starvation_count",
    "expanded_nodes",
    "loss_total",
    "loss_policy",
    "loss_value",
    "wall_time_s",
];

/// Row-at-a-time CSV writer that flushes after every row, so a failed run
/// keeps its completed iterations.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<()> {
        self.inner.serialize(m)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub const DISCOVERY_HEADER: [&str; 4] = ["target_id", "seed", "nodes_expanded", "found"];

pub fn write_discovery(path: &Path, records: &[DiscoveryRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(DISCOVERY_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_discovery(path: &Path) -> Result<Vec<DiscoveryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub discovery: Option<Vec<DiscoveryRecord>>,
    pub dir: Option<PathBuf>,
}

/// Runs a whole configuration. With `dir`, writes `metrics.csv`,
/// `discovery.csv` (equation discovery only) and `model.ckpt` there.
pub fn execute(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunOutcome> {
    match cfg.build_env()? {
        AnyEnv::BitFlip(env) => execute_generic(Trainer::new(env, cfg.clone())?, dir, Trainer::run_iteration, |_| Ok(None)),
        AnyEnv::Maze(env) => execute_generic(Trainer::new(env, cfg.clone())?, dir, Trainer::run_iteration, |_| Ok(None)),
        AnyEnv::Equation(env) => {
            let iterate = if cfg.mode.is_supervised() {
                Trainer::run_sl_iteration
            } else {
                Trainer::run_iteration
            };
            execute_generic(Trainer::new(env, cfg.clone())?, dir, iterate, |t| t.discover().map(Some))
        }
    }
}

fn execute_generic<E: Environment>(
    mut trainer: Trainer<E>,
    dir: Option<&Path>,
    iterate: impl Fn(&mut Trainer<E>) -> Result<IterationMetrics>,
    discover: impl Fn(&Trainer<E>) -> Result<Option<Vec<DiscoveryRecord>>>,
) -> Result<RunOutcome> {
    let mut writer = match dir {
        Some(d) => Some(MetricsWriter::create(&d.join("metrics.csv"))?),
        None => None,
    };
    let mut metrics = Vec::new();
    for _ in 0..trainer.cfg.iterations {
        let m = iterate(&mut trainer)?;
        if let Some(w) = writer.as_mut() {
            w.write(&m)?;
        }
        let stop = trainer.cfg.stop_at_success.is_some_and(|s| m.success_rate >= s);
        metrics.push(m);
        if stop {
            break;
        }
    }
    let discovery = discover(&trainer)?;
    if let Some(d) = dir {
        if let Some(records) = &discovery {
            write_discovery(&d.join("discovery.csv"), records)?;
        }
        if trainer.cfg.checkpoint {
            trainer.params.save(&trainer.opt, &d.join("model.ckpt"))?;
        }
    }
    Ok(RunOutcome {
        metrics,
        discovery,
        dir: dir.map(Path::to_path_buf),
    })
}
