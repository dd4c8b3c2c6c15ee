//! Run configuration: TOML documents, dotted-key overrides, sweep axes and
//! run-directory naming.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::environments::{
    parse_target_pool, BitFlip, BitFlipConfig, EqDiscConfig, EquationDiscovery, KinematicMaze,
    MazeConfig, MazeLayout,
};
use crate::grammar::Grammar;
use crate::mcts::MctsParams;
use crate::model::AdamHyper;
use crate::replay::{AherConfig, GoalStrategy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain self-play; the relabeler is not run.
    Rl,
    /// Self-play with hindsight relabeling per `[aher]`.
    RlAher,
    /// Supervised training on ground-truth derivations.
    Sl,
    /// Supervised training with a fresh dataset every step.
    SlDc,
}

impl Mode {
    pub fn is_supervised(self) -> bool {
        matches!(self, Mode::Sl | Mode::SlDc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    BitFlip(BitFlipSection),
    Maze(MazeSection),
    Equation(EquationSection),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitFlipSection {
    pub n_bits: usize,
    /// Defaults to `n_bits`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MazeSection {
    /// Layout file; the built-in medium maze when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
    pub dt: f64,
    pub accel: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub success_radius: f64,
    pub horizon: usize,
    pub random_start: bool,
    pub fixed_goal: bool,
    pub reset_noise: f64,
}

impl Default for MazeSection {
    fn default() -> Self {
        let d = MazeConfig::default();
        MazeSection {
            layout: None,
            dt: d.dt,
            accel: d.accel,
            damping: d.damping,
            max_speed: d.max_speed,
            success_radius: d.success_radius,
            horizon: d.horizon,
            random_start: d.random_start,
            fixed_goal: d.fixed_goal,
            reset_noise: d.reset_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquationSection {
    /// Grammar file; the shipped grammar when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grammar: Option<PathBuf>,
    /// Target pool file, one expression per line; shipped pool when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<PathBuf>,
    pub n_points: usize,
    pub x_range: [f64; 2],
    pub nrmse_threshold: f64,
    pub max_rules: usize,
}

impl Default for EquationSection {
    fn default() -> Self {
        let d = EqDiscConfig::shipped();
        EquationSection {
            grammar: None,
            targets: None,
            n_points: d.n_points,
            x_range: [d.x_range.0, d.x_range.1],
            nrmse_threshold: d.nrmse_threshold,
            max_rules: d.max_rules,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = AdamHyper::default();
        ModelSection {
            hidden: vec![256, 256, 128],
            dropout: 0.3,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            l2: 1e-4,
        }
    }
}

impl ModelSection {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoverySection {
    /// Expanded-node budget per (target, seed) cell.
    pub budget: usize,
    /// Cost charged for a cell that never finds its target.
    pub failure_cost: f64,
}

impl Default for DiscoverySection {
    fn default() -> Self {
        DiscoverySection {
            budget: 1000,
            failure_cost: 1000.0,
        }
    }
}

fn default_mode() -> Mode {
    Mode::RlAher
}
fn default_episodes() -> usize {
    10
}
fn default_train_steps() -> usize {
    50
}
fn default_eval() -> usize {
    20
}
fn default_batch() -> usize {
    128
}
fn default_capacity() -> usize {
    200_000
}
fn default_cutoff() -> f64 {
    0.6
}
fn default_workers() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub iterations: usize,
    #[serde(default = "default_episodes")]
    pub episodes_per_iteration: usize,
    #[serde(default = "default_train_steps")]
    pub train_steps_per_iteration: usize,
    #[serde(default = "default_eval")]
    pub eval_episodes: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    /// Fraction of the horizon played at temperature 1 before going greedy.
    #[serde(default = "default_cutoff")]
    pub temperature_cutoff: f64,
    /// Regenerate equation-discovery datasets when relabeling.
    #[serde(default)]
    pub dataset_change: bool,
    /// Self-play threads; results do not depend on this.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Stop once evaluation success reaches this rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at_success: Option<f64>,
    #[serde(default = "default_true")]
    pub checkpoint: bool,
    pub env: EnvConfig,
    #[serde(default)]
    pub mcts: MctsSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub aher: AherConfig,
    #[serde(default)]
    pub discovery: DiscoverySection,
}

/// Search settings; `simulations` defaults per environment (50, or 100 for
/// equation discovery).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulations: Option<usize>,
    pub c_puct: f64,
    pub root_noise: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dirichlet_alpha: Option<f64>,
    pub noise_weight: f64,
}

impl Default for MctsSection {
    fn default() -> Self {
        let d = MctsParams::default();
        MctsSection {
            simulations: None,
            c_puct: d.c_puct,
            root_noise: d.root_noise,
            dirichlet_alpha: d.dirichlet_alpha,
            noise_weight: d.noise_weight,
        }
    }
}

/// A constructed environment of any supported kind.
pub enum AnyEnv {
    BitFlip(BitFlip),
    Maze(KinematicMaze),
    Equation(EquationDiscovery),
}

impl RunConfig {
    pub fn env_kind(&self) -> &'static str {
        match self.env {
            EnvConfig::BitFlip(_) => "bit_flip",
            EnvConfig::Maze(_) => "maze",
            EnvConfig::Equation(_) => "equation",
        }
    }

    pub fn mcts_params(&self) -> MctsParams {
        let default_sims = match self.env {
            EnvConfig::Equation(_) => 100,
            _ => 50,
        };
        MctsParams {
            simulations: self.mcts.simulations.unwrap_or(default_sims),
            c_puct: self.mcts.c_puct,
            root_noise: self.mcts.root_noise,
            dirichlet_alpha: self.mcts.dirichlet_alpha,
            noise_weight: self.mcts.noise_weight,
        }
    }

    /// Fills environment-dependent defaults so the echoed file is explicit.
    pub fn resolve(mut self) -> Self {
        self.mcts.simulations = Some(self.mcts_params().simulations);
        if let EnvConfig::BitFlip(b) = &mut self.env {
            b.horizon.get_or_insert(b.n_bits);
        }
        self
    }

    pub fn build_env(&self) -> Result<AnyEnv> {
        let wrap = |e: Error| Error::Config(e.to_string());
        Ok(match &self.env {
            EnvConfig::BitFlip(b) => AnyEnv::BitFlip(
                BitFlip::new(&BitFlipConfig {
                    n_bits: b.n_bits,
                    horizon: b.horizon,
                })
                .map_err(wrap)?,
            ),
            EnvConfig::Maze(m) => {
                let layout = match &m.layout {
                    Some(p) => MazeLayout::parse(&read(p)?).map_err(wrap)?,
                    None => MazeLayout::medium(),
                };
                AnyEnv::Maze(
                    KinematicMaze::new(MazeConfig {
                        layout,
                        dt: m.dt,
                        accel: m.accel,
                        damping: m.damping,
                        max_speed: m.max_speed,
                        success_radius: m.success_radius,
                        horizon: m.horizon,
                        random_start: m.random_start,
                        fixed_goal: m.fixed_goal,
                        reset_noise: m.reset_noise,
                    })
                    .map_err(wrap)?,
                )
            }
            EnvConfig::Equation(e) => {
                let shipped = EqDiscConfig::shipped();
                let grammar = match &e.grammar {
                    Some(p) => Arc::new(Grammar::parse(&read(p)?).map_err(wrap)?),
                    None => shipped.grammar,
                };
                let targets = match &e.targets {
                    Some(p) => parse_target_pool(&read(p)?).map_err(wrap)?,
                    None => shipped.targets,
                };
                AnyEnv::Equation(
                    EquationDiscovery::new(EqDiscConfig {
                        grammar,
                        n_points: e.n_points,
                        x_range: (e.x_range[0], e.x_range[1]),
                        nrmse_threshold: e.nrmse_threshold,
                        max_rules: e.max_rules,
                        targets,
                    })
                    .map_err(wrap)?,
                )
            }
        })
    }

    /// Cross-field checks that the type system cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mode.is_supervised() && !matches!(self.env, EnvConfig::Equation(_)) {
            return bad(format!(
                "mode {:?} is only available for equation discovery",
                self.mode
            ));
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive".into());
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.workers == 0 {
            return bad("batch_size, buffer_capacity and workers must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.temperature_cutoff) {
            return bad("temperature_cutoff must lie in [0, 1]".into());
        }
        if self.mcts_params().simulations == 0 {
            return bad("mcts.simulations must be positive".into());
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model.hidden needs positive layer widths".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad("model.dropout must lie in [0, 1)".into());
        }
        if self.mode == Mode::RlAher
            && self.aher.samples > 0
            && self.aher.goal_strategy == GoalStrategy::Future
            && matches!(self.env, EnvConfig::Equation(_))
        {
            return bad("the future goal strategy is not applicable to equation discovery".into());
        }
        if self.aher.noise_eta < 0.0 || !(self.aher.archer_scale >= 1.0) {
            return bad("aher.noise_eta must be >= 0 and aher.archer_scale >= 1".into());
        }
        if self.discovery.budget == 0 {
            return bad("discovery.budget must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex digest of the resolved configuration with the seed cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir_name(&self) -> String {
        format!("run-{}-s{}", &self.hash()[..16], self.seed)
    }
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

/// Parses `VALUE` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    set_path(doc, key.trim(), parse_value(value.trim()))
}

fn parse_doc(text: &str) -> Result<toml::Table> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn from_doc(doc: toml::Table) -> Result<RunConfig> {
    // Re-render so errors carry line numbers of the merged document.
    let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a run configuration and applies `KEY=VALUE` overrides.
pub fn load_run_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    // The direct parse keeps line numbers of the user's file in errors.
    if overrides.is_empty() && !parse_doc(text)?.contains_key("sweep") {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolve();
        cfg.validate()?;
        return Ok(cfg);
    }
    let mut doc = parse_doc(text)?;
    doc.remove("sweep");
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    from_doc(doc)
}

/// A base configuration plus sweep axes and seeds.
#[derive(Debug, Clone)]
pub struct ExperimentFile {
    pub base: toml::Table,
    pub seeds: Vec<u64>,
    /// Dotted config key → values, in key order.
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSection {
    #[serde(default)]
    seeds: Option<Vec<u64>>,
    #[serde(default)]
    axes: BTreeMap<String, Vec<toml::Value>>,
}

impl ExperimentFile {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut base = parse_doc(text)?;
        let sweep: SweepSection = match base.remove("sweep") {
            Some(v) => v
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("[sweep]: {e}")))?,
            None => SweepSection {
                seeds: None,
                axes: BTreeMap::new(),
            },
        };
        for o in overrides {
            apply_override(&mut base, o)?;
        }
        let seeds = sweep.seeds.unwrap_or_else(|| {
            vec![base.get("seed").and_then(|v| v.as_integer()).unwrap_or(0) as u64]
        });
        let file = ExperimentFile {
            base,
            seeds,
            axes: sweep.axes,
        };
        if file.seeds.is_empty() || file.axes.values().any(|v| v.is_empty()) {
            return Err(Error::Config("empty sweep".into()));
        }
        // Every axis must name a real key: probe with the first value.
        for (key, values) in &file.axes {
            let mut doc = file.base.clone();
            set_path(&mut doc, key, values[0].clone())?;
            from_doc(doc).map_err(|e| Error::Config(format!("sweep axis `{key}`: {e}")))?;
        }
        Ok(file)
    }

    /// Cartesian product of the axes, one assignment per cell.
    pub fn cells(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut cells: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }

    pub fn config_for(&self, cell: &[(String, toml::Value)], seed: u64) -> Result<RunConfig> {
        let mut doc = self.base.clone();
        for (k, v) in cell {
            set_path(&mut doc, k, v.clone())?;
        }
        set_path(&mut doc, "seed", toml::Value::Integer(seed as i64))?;
        from_doc(doc)
    }
}
