//! Command-line surface: `run`, `sweep` and `report`.
//!
//! Each run owns a directory `run-<config hash>-s<seed>` holding the
//! resolved `config.toml`, `metrics.csv`, `discovery.csv` (equation
//! discovery), `model.ckpt` and a `completed` marker written last. Sweeps
//! skip directories that already carry the marker, so an interrupted sweep
//! resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_run_config, ExperimentFile, RunConfig};
use crate::stats::{confidence_interval, mean, median};
use crate::trainer::{
    discovery_cost, execute, iterations_to_threshold, read_discovery, read_metrics, DiscoveryRecord,
    IterationMetrics,
};
use crate::{Error, Result};

pub const COMPLETED: &str = "completed";
pub const THRESHOLD: f64 = 0.8;

#[derive(Debug, Parser)]
#[command(name = "aher", version, about = "AlphaZero with hindsight experience replay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration.
    Run(RunArgs),
    /// Run every cell of a sweep for every seed, then aggregate.
    Sweep(RunArgs),
    /// Build plot-ready CSVs from run directories or sweep roots.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted `KEY=VALUE`, repeatable; values parse as TOML, else as text.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Replaces the configured seed (or the sweep's seed list).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn main_with(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a.dirs, &a.out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_config_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Runs one resolved configuration into `out/<run dir>` and returns the
/// directory.
pub fn run_into(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let dir = out.join(cfg.run_dir_name());
    fs::create_dir_all(&dir)?;
    let _ = fs::remove_file(dir.join(COMPLETED));
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    eprintln!("run {} ({} iterations)", dir.display(), cfg.iterations);
    execute(cfg, Some(&dir))?;
    fs::write(dir.join(COMPLETED), "")?;
    Ok(dir)
}

pub fn cmd_run(a: &RunArgs) -> Result<PathBuf> {
    let text = read_config_text(&a.config)?;
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = load_run_config(&text, &overrides)?;
    run_into(&cfg, &a.out)
}

fn cell_label(cell: &[(String, toml::Value)]) -> String {
    if cell.is_empty() {
        return "base".into();
    }
    cell.iter()
        .map(|(k, v)| match v {
            toml::Value::String(s) => format!("{k}={s}"),
            other => format!("{k}={other}"),
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn cmd_sweep(a: &RunArgs) -> Result<PathBuf> {
    let text = read_config_text(&a.config)?;
    let mut file = ExperimentFile::parse(&text, &a.overrides)?;
    if let Some(s) = a.seed {
        file.seeds = vec![s];
    }
    let cells = file.cells();
    // Resolve everything first so a bad cell fails before any training.
    let mut plan = Vec::new();
    for cell in &cells {
        let runs = file
            .seeds
            .iter()
            .map(|&s| file.config_for(cell, s))
            .collect::<Result<Vec<_>>>()?;
        plan.push((cell_label(cell), runs));
    }
    fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    for (label, runs) in &plan {
        let mut dirs = Vec::new();
        for cfg in runs {
            let dir = a.out.join(cfg.run_dir_name());
            if dir.join(COMPLETED).exists() {
                eprintln!("skip {} (completed)", dir.display());
            } else {
                run_into(cfg, &a.out)?;
            }
            dirs.push(dir);
        }
        let loaded = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
        rows.push(aggregate_row(label, &loaded)?);
    }
    let path = a.out.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(path)
}

pub const AGGREGATE_HEADER: [&str; 11] = [
    "cell",
    "seeds",
    "final_success_mean",
    "final_success_ci",
    "final_return_mean",
    "final_return_ci",
    "reached_threshold",
    "iterations_to_threshold_mean",
    "nodes_expanded_mean",
    "nodes_expanded_median",
    "nodes_expanded_ci",
];

/// One completed run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub metrics: Vec<IterationMetrics>,
    pub discovery: Option<Vec<DiscoveryRecord>>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let text = fs::read_to_string(dir.join("config.toml"))
        .map_err(|e| Error::Runtime(format!("{}: {e}", dir.display())))?;
    let config = load_run_config(&text, &[])?;
    let metrics = read_metrics(&dir.join("metrics.csv"))?;
    if metrics.is_empty() {
        return Err(Error::Runtime(format!("{}: empty metrics.csv", dir.display())));
    }
    let disc = dir.join("discovery.csv");
    let discovery = if disc.exists() { Some(read_discovery(&disc)?) } else { None };
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        metrics,
        discovery,
    })
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn ci_or_blank(values: &[f64]) -> String {
    confidence_interval(values).map(|(_, h)| fmt(h)).unwrap_or_default()
}

fn aggregate_row(label: &str, runs: &[LoadedRun]) -> Result<Vec<String>> {
    let last: Vec<&IterationMetrics> = runs.iter().map(|r| r.metrics.last().unwrap()).collect();
    let success: Vec<f64> = last.iter().map(|m| m.success_rate).collect();
    let returns: Vec<f64> = last.iter().map(|m| m.mean_return).collect();
    let mut hits = Vec::new();
    for r in runs {
        let series: Vec<f64> = r.metrics.iter().map(|m| m.success_rate).collect();
        if let Some(i) = iterations_to_threshold(&series, THRESHOLD)? {
            hits.push(i as f64);
        }
    }
    let costs: Vec<f64> = runs
        .iter()
        .filter_map(|r| {
            r.discovery
                .as_ref()
                .map(|d| d.iter().map(|x| discovery_cost(x, r.config.discovery.failure_cost)).collect::<Vec<_>>())
        })
        .flatten()
        .collect();
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    Ok(vec![
        label.to_string(),
        runs.len().to_string(),
        fmt(mean(&success).unwrap()),
        ci_or_blank(&success),
        fmt(mean(&returns).unwrap()),
        ci_or_blank(&returns),
        hits.len().to_string(),
        opt(mean(&hits)),
        opt(mean(&costs)),
        opt(median(&costs)),
        ci_or_blank(&costs),
    ])
}

/// Expands sweep roots into their run directories.
fn collect_dirs(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for d in inputs {
        if d.join("config.toml").exists() || !d.is_dir() {
            out.push(d.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(d)
            .into_iter()
            .flatten()
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.join("config.toml").exists())
            .collect();
        if children.is_empty() {
            out.push(d.clone());
        }
        children.sort();
        out.extend(children);
    }
    out
}

/// Flattens a TOML table into dotted keys.
fn flatten(prefix: &str, t: &toml::Table, out: &mut BTreeMap<String, String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(sub) => flatten(&key, sub, out),
            other => {
                out.insert(key, other.to_string());
            }
        }
    }
}

/// Labels groups of runs by the config keys that differ between groups.
fn group_labels(groups: &BTreeMap<String, Vec<LoadedRun>>) -> BTreeMap<String, String> {
    let flat: BTreeMap<&String, BTreeMap<String, String>> = groups
        .iter()
        .map(|(h, runs)| {
            let mut c = runs[0].config.clone();
            c.seed = 0;
            let table: toml::Table = toml::from_str(&c.to_toml()).expect("config echo parses");
            let mut m = BTreeMap::new();
            flatten("", &table, &mut m);
            (h, m)
        })
        .collect();
    let mut keys: Vec<String> = flat.values().flat_map(|m| m.keys().cloned()).collect();
    keys.sort();
    keys.dedup();
    let varying: Vec<String> = keys
        .into_iter()
        .filter(|k| {
            let mut vals = flat.values().map(|m| m.get(k));
            let first = vals.next().flatten();
            vals.any(|v| v != first)
        })
        .collect();
    flat.iter()
        .map(|(h, m)| {
            let label = if varying.is_empty() {
                "all".to_string()
            } else {
                varying
                    .iter()
                    .map(|k| format!("{k}={}", m.get(k).map(String::as_str).unwrap_or("")))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            ((*h).clone(), label)
        })
        .collect()
}

/// Writes `success_curve.csv` (success and return per iteration with CI
/// bands, grouped by configuration) and, for equation discovery,
/// `nodes_distribution.csv` plus `nodes_summary.csv` with the failure cost
/// applied.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let dirs = collect_dirs(inputs);
    if dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for d in &dirs {
        match load_run(d) {
            Ok(r) => runs.push(r),
            Err(e) => eprintln!("warning: skipping {}: {e}", d.display()),
        }
    }
    if runs.is_empty() {
        return Err(Error::Runtime("no readable run directories".into()));
    }
    let kind = runs[0].config.env_kind();
    if let Some(r) = runs.iter().find(|r| r.config.env_kind() != kind) {
        return Err(Error::Config(format!(
            "mixed environments in one report: {kind} and {} ({})",
            r.config.env_kind(),
            r.dir.display()
        )));
    }
    let mut groups: BTreeMap<String, Vec<LoadedRun>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.config.hash()).or_default().push(r);
    }
    let labels = group_labels(&groups);
    fs::create_dir_all(out)?;

    let with_ci = groups.values().any(|g| g.len() >= 2);
    let mut w = csv::Writer::from_path(out.join("success_curve.csv"))?;
    let mut header = vec!["cell", "iteration", "runs", "success_mean"];
    if with_ci {
        header.push("success_ci");
    }
    header.push("return_mean");
    if with_ci {
        header.push("return_ci");
    }
    w.write_record(&header)?;
    for (h, g) in &groups {
        let len = g.iter().map(|r| r.metrics.len()).max().unwrap();
        for i in 0..len {
            // Runs that stopped early hold their last value.
            let at = |r: &LoadedRun| r.metrics[i.min(r.metrics.len() - 1)].clone();
            let s: Vec<f64> = g.iter().map(|r| at(r).success_rate).collect();
            let ret: Vec<f64> = g.iter().map(|r| at(r).mean_return).collect();
            let mut row = vec![labels[h].clone(), i.to_string(), g.len().to_string(), fmt(mean(&s).unwrap())];
            if with_ci {
                row.push(ci_or_blank(&s));
            }
            row.push(fmt(mean(&ret).unwrap()));
            if with_ci {
                row.push(ci_or_blank(&ret));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    if groups.values().flatten().any(|r| r.discovery.is_some()) {
        let mut dist = csv::Writer::from_path(out.join("nodes_distribution.csv"))?;
        dist.write_record(["cell", "target_id", "seed", "nodes_expanded", "found", "cost"])?;
        let mut summary = csv::Writer::from_path(out.join("nodes_summary.csv"))?;
        let mut sh = vec!["cell", "records", "mean", "median"];
        if with_ci {
            sh.push("ci");
        }
        summary.write_record(&sh)?;
        for (h, g) in &groups {
            let mut costs = Vec::new();
            for r in g {
                for rec in r.discovery.iter().flatten() {
                    let c = discovery_cost(rec, r.config.discovery.failure_cost);
                    costs.push(c);
                    dist.write_record([
                        labels[h].clone(),
                        rec.target_id.clone(),
                        rec.seed.to_string(),
                        rec.nodes_expanded.to_string(),
                        rec.found.to_string(),
                        fmt(c),
                    ])?;
                }
            }
            if costs.is_empty() {
                continue;
            }
            let mut row = vec![
                labels[h].clone(),
                costs.len().to_string(),
                fmt(mean(&costs).unwrap()),
                fmt(median(&costs).unwrap()),
            ];
            if with_ci {
                row.push(ci_or_blank(&costs));
            }
            summary.write_record(&row)?;
        }
        dist.flush()?;
        summary.flush()?;
    }
    Ok(())
}
