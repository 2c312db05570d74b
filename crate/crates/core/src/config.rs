//! TOML configuration files.
//!
//! ```toml
//! [topology]
//! kind = "replicated_line"   # or "edge_list" with `edges` or `file`
//! m = 16
//! layers = 40
//!
//! [params]
//! d = 1.0
//! u = 0.002
//! theta = 1.0002
//! lambda = 2.0
//!
//! [run]
//! pulses = 20
//! seed = 7
//! ```
//!
//! Optional sections: `[source]`, `[delays]`, `[clocks]`, `[faults]`,
//! `[corruption]`, `[perturbation]`, `[experiment]`. See the README for keys.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::engine::{
    CorruptionSpec, EngineError, FaultConfig, MachineKind, RandomFaults, RunConfig, SourceMode, TopologySpec,
};
use crate::faults::{FaultBehavior, FaultKind, FaultPlacement, PerturbationSpec};
use crate::timing::{validate_params, ClockStrategy, DelayStrategy, ParamViolation, Params, TimingError};
use crate::topology::{BaseGraph, NodeId, VertexId};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Syntax(String),
    #[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, message: String },
    #[error("{}parameters outside the validated regime (use --force to run anyway):\n  {}", line.map(|l| format!("line {l}: ")).unwrap_or_default(), violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n  "))]
    Regime { line: Option<usize>, violations: Vec<ParamViolation> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TopologyKind {
    ReplicatedLine,
    EdgeList,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologySection {
    kind: TopologyKind,
    m: Option<usize>,
    edges: Option<Vec<(VertexId, VertexId)>>,
    file: Option<PathBuf>,
    layers: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsSection {
    d: f64,
    u: f64,
    theta: f64,
    lambda: f64,
    #[serde(default = "default_c")]
    c: f64,
    /// Skew budget used by the regime validation; defaults to `4 kappa (2 + log2 D)`.
    skew_budget: Option<f64>,
}

fn default_c() -> f64 {
    2.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SourceKind {
    #[default]
    Ideal,
    Chain,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceSection {
    #[serde(default)]
    mode: SourceKind,
    jitter: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClockSection {
    #[serde(default)]
    kind: ClockStrategy,
}

#[derive(Debug, Deserialize)]
struct NodeFault {
    layer: u32,
    vertex: VertexId,
    #[serde(flatten)]
    behavior: FaultKind<f64>,
    targets: Option<Vec<VertexId>>,
}

#[derive(Debug, Deserialize)]
struct BehaviorSpec {
    #[serde(flatten)]
    behavior: FaultKind<f64>,
    targets: Option<Vec<VertexId>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FaultSection {
    #[serde(default = "yes")]
    strict: bool,
    probability: Option<f64>,
    #[serde(default)]
    behaviors: Vec<BehaviorSpec>,
    #[serde(default)]
    node: Vec<NodeFault>,
    /// Randomly placed faults whose timing changes between pulses; the rest are made static.
    #[serde(default = "one")]
    max_changing: usize,
}

impl Default for FaultSection {
    fn default() -> Self {
        Self { strict: true, probability: None, behaviors: Vec::new(), node: Vec::new(), max_changing: 1 }
    }
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    pulses: u64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    machine: MachineKind,
    #[serde(default)]
    record_events: bool,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted key path, e.g. `topology.m` or `params.u`.
    pub path: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentSection {
    seeds: Option<Vec<u64>>,
    /// Half-open `[start, end)`.
    seed_range: Option<(u64, u64)>,
    trials: Option<u64>,
    checks: Option<Vec<String>>,
    #[serde(default)]
    axis: Vec<Axis>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    topology: TopologySection,
    params: ParamsSection,
    #[serde(default)]
    source: SourceSection,
    #[serde(default)]
    delays: DelayStrategy<f64>,
    #[serde(default)]
    clocks: ClockSection,
    #[serde(default)]
    faults: FaultSection,
    run: RunSection,
    corruption: Option<CorruptionSpec>,
    perturbation: Option<PerturbationSpec<f64>>,
    experiment: Option<ExperimentSection>,
}

/// Seeds, axes and checks of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    pub checks: Option<Vec<String>>,
    pub axes: Vec<Axis>,
}

/// A parsed configuration file.
#[derive(Clone, Debug)]
pub struct Config {
    pub run: RunConfig<f64>,
    pub skew_budget: Option<f64>,
    pub experiment: ExperimentSpec,
    raw: toml::Table,
    text: String,
    base_dir: PathBuf,
}

/// Line (1-based) of `key` inside `[section]`, or of the section header.
fn locate(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let header = format!("[{section}]");
    let mut in_section = false;
    let mut header_line = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            in_section = t == header || t == format!("[{header}]");
            if in_section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if in_section {
            if let Some(k) = key {
                let name = t.split('=').next().unwrap_or("").trim();
                if name == k {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &dir)
    }

    /// Parses `text`; relative paths inside it resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        if let Err(e) = toml::from_str::<FileConfig>(text) {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            return Err(ConfigError::Invalid { line, message: e.message().to_string() });
        }
        Self::from_table(raw, text, base_dir)
    }

    fn from_table(raw: toml::Table, text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let file: FileConfig = toml::Value::Table(raw.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let invalid = |section: &str, key: Option<&str>, message: String| ConfigError::Invalid {
            line: locate(text, section, key),
            message,
        };
        let topo = &file.topology;
        let topology = match topo.kind {
            TopologyKind::ReplicatedLine => {
                let m = topo.m.ok_or_else(|| invalid("topology", Some("kind"), "replicated_line needs `m`".into()))?;
                TopologySpec::ReplicatedLine { m }
            }
            TopologyKind::EdgeList => {
                let edges = match (&topo.edges, &topo.file) {
                    (Some(e), None) => e.clone(),
                    (None, Some(f)) => {
                        let path = base_dir.join(f);
                        let body = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io { path, source })?;
                        let g = BaseGraph::parse_edge_list(&body)
                            .map_err(|e| invalid("topology", Some("file"), format!("{}: {e}", f.display())))?;
                        g.edges().collect()
                    }
                    _ => {
                        return Err(invalid("topology", Some("kind"), "edge_list needs exactly one of `edges`, `file`".into()))
                    }
                };
                TopologySpec::EdgeList { edges }
            }
        };
        let key = if topo.kind == TopologyKind::ReplicatedLine { "m" } else { "edges" };
        topology.build().map_err(|e| invalid("topology", Some(key), e.to_string()))?;
        let ps = &file.params;
        let params = Params::new(ps.d, ps.u, ps.theta, ps.lambda, ps.c).map_err(|e| {
            let key = match &e {
                TimingError::NotPositive { name, .. } => *name,
                TimingError::RateBelowOne(_) => "theta",
                TimingError::PeriodBelowDelay { .. } => "lambda",
                _ => "u",
            };
            invalid("params", Some(key), e.to_string())
        })?;
        let source = match file.source.mode {
            SourceKind::Ideal => SourceMode::Ideal { jitter: file.source.jitter.unwrap_or(params.kappa / 4.0) },
            SourceKind::Chain => {
                if file.source.jitter.is_some() {
                    return Err(invalid("source", Some("jitter"), "jitter only applies to the ideal source".into()));
                }
                SourceMode::Chain
            }
        };
        let fs = &file.faults;
        let mut placement = FaultPlacement::default();
        for n in &fs.node {
            let b = FaultBehavior { behavior: n.behavior.clone(), targets: n.targets.clone() };
            if placement.nodes.insert(NodeId::new(n.layer, n.vertex), b).is_some() {
                return Err(invalid("faults", None, format!("node ({},{}) listed twice", n.vertex, n.layer)));
            }
        }
        let behaviors: Vec<FaultBehavior<f64>> =
            fs.behaviors.iter().map(|b| FaultBehavior { behavior: b.behavior.clone(), targets: b.targets.clone() }).collect();
        if let Some(p) = fs.probability.filter(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("faults", Some("probability"), format!("probability {p} is outside [0, 1]")));
        }
        let random = fs.probability.map(|probability| RandomFaults { probability, behaviors, max_changing: fs.max_changing });
        let run = RunConfig {
            topology,
            layers: file.topology.layers,
            params,
            source,
            delays: file.delays,
            clocks: file.clocks.kind,
            faults: FaultConfig { placement, random, strict: fs.strict },
            pulses: file.run.pulses,
            machine: file.run.machine,
            corruption: file.corruption,
            perturbation: file.perturbation,
            seed: file.run.seed,
            record_events: file.run.record_events,
        };
        let mut fixed = run.clone();
        fixed.faults.random = None;
        fixed.build().map_err(|e| {
            let (section, key) = match &e {
                EngineError::Fault(_) => ("faults", None),
                EngineError::Timing(_) => ("delays", None),
                EngineError::Config(m) if m.contains("jitter") => ("source", Some("jitter")),
                EngineError::Config(m) if m.contains("chain") => ("source", Some("mode")),
                _ => ("run", Some("pulses")),
            };
            invalid(section, key, e.to_string())
        })?;
        let ex = file.experiment.unwrap_or_default();
        let seeds = match (ex.seeds, ex.seed_range, ex.trials) {
            (Some(s), None, None) => s,
            (None, Some((a, b)), None) => (a..b).collect(),
            (None, None, Some(n)) => (0..n).map(|i| run.seed.wrapping_add(i)).collect(),
            (None, None, None) => vec![run.seed],
            _ => {
                return Err(invalid("experiment", None, "give at most one of `seeds`, `seed_range`, `trials`".into()))
            }
        };
        if seeds.is_empty() {
            return Err(invalid("experiment", None, "seed list is empty".into()));
        }
        if let Some(checks) = &ex.checks {
            check_names(checks).map_err(|m| invalid("experiment", Some("checks"), m))?;
        }
        for axis in &ex.axis {
            if lookup(&raw, &axis.path).is_none() && !axis_may_add(&axis.path) {
                return Err(invalid("experiment", None, format!("axis path `{}` does not name a config key", axis.path)));
            }
            if axis.values.is_empty() {
                return Err(invalid("experiment", None, format!("axis `{}` has no values", axis.path)));
            }
        }
        Ok(Self {
            run,
            skew_budget: ps.skew_budget,
            experiment: ExperimentSpec { seeds, checks: ex.checks, axes: ex.axis },
            raw,
            text: text.to_string(),
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Regime violations for the configured parameters and topology.
    pub fn regime_violations(&self) -> Vec<ParamViolation> {
        let diameter = self.run.topology.build().map(|g| g.diameter()).unwrap_or(1);
        validate_params(&self.run.params, diameter, self.skew_budget)
    }

    /// Fails with [`ConfigError::Regime`] unless the parameters are validated or `force` is set.
    pub fn check_regime(&self, force: bool) -> Result<(), ConfigError> {
        let violations = self.regime_violations();
        if violations.is_empty() || force {
            return Ok(());
        }
        let key = match violations[0] {
            ParamViolation::PeriodTooShort { .. } => "lambda",
            ParamViolation::DelayTooShort { .. } => "d",
        };
        Err(ConfigError::Regime { line: locate(&self.text, "params", Some(key)), violations })
    }

    /// Copy with `path` set to `value` and the seed replaced.
    pub fn with_override(&self, edits: &[(String, toml::Value)], seed: u64) -> Result<Self, ConfigError> {
        let mut raw = self.raw.clone();
        for (path, value) in edits {
            assign(&mut raw, path, value.clone())
                .map_err(|m| ConfigError::Invalid { line: locate(&self.text, "experiment", None), message: m })?;
        }
        assign(&mut raw, "run.seed", toml::Value::Integer(seed as i64)).map_err(|m| ConfigError::Invalid {
            line: None,
            message: m,
        })?;
        let mut cfg = Self::from_table(raw, &self.text, &self.base_dir)?;
        cfg.experiment = self.experiment.clone();
        Ok(cfg)
    }

    /// Every combination of axis values, in row-major order of the axes.
    pub fn axis_points(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut points = vec![Vec::new()];
        for axis in &self.experiment.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((axis.path.clone(), v.clone()));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

/// Validates `--checks` style names.
pub fn check_names(names: &[String]) -> Result<(), String> {
    match names.iter().find(|n| !crate::analysis::CHECK_NAMES.contains(&n.as_str())) {
        Some(bad) => Err(format!("unknown check `{bad}`; known: {}", crate::analysis::CHECK_NAMES.join(", "))),
        None => Ok(()),
    }
}

/// Keys of optional sections that an axis may introduce.
fn axis_may_add(path: &str) -> bool {
    const OPTIONAL: &[&str] = &["faults.probability", "params.c", "params.skew_budget", "source.jitter", "run.machine"];
    OPTIONAL.contains(&path) || path.starts_with("corruption.") || path.starts_with("perturbation.")
}

fn lookup<'a>(table: &'a toml::Table, path: &str) -> Option<&'a toml::Value> {
    let mut parts = path.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn assign(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), String> {
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().ok_or_else(|| "empty axis path".to_string())?;
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{k}` in `{path}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
