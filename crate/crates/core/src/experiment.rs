//! Sweeps, stabilization runs and fault Monte-Carlo over a [`Config`].
//!
//! Trials run on the current rayon pool; rows come back ordered by axis point,
//! then seed.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::{build_report, stabilization_pulse, Analysis, Report};
use crate::config::{Config, ConfigError};
use crate::engine::{simulate, CorruptionSpec, EngineError, RunStatus, SourceMode};
use crate::faults::validate_placement;
use crate::scalar::fmt_sig17;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("point {point}, seed {seed}: {source}")]
    Engine { point: String, seed: u64, source: EngineError },
    #[error("{0}")]
    Spec(String),
}

/// One `path=value` pair per axis, joined by `;`.
pub fn point_label(point: &[(String, toml::Value)]) -> String {
    point.iter().map(|(p, v)| format!("{p}={v}")).collect::<Vec<_>>().join(";")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: String,
    pub seed: u64,
    pub status: String,
    pub max_layer_skew: Option<f64>,
    pub overall_skew: Option<f64>,
    pub skew_bound: f64,
    /// Largest potential per level.
    pub max_psi: Vec<Option<f64>>,
    pub passed: bool,
    pub failed_checks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub point: String,
    pub count: usize,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub passed: usize,
}

/// Nearest-rank quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

pub fn summarize(point: &str, values: &[Option<f64>], passed: usize) -> Summary {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    v.sort_by(f64::total_cmp);
    let mean = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Summary {
        point: point.to_string(),
        count: values.len(),
        max: v.last().copied(),
        mean,
        p50: quantile(&v, 0.5),
        p90: quantile(&v, 0.9),
        passed,
    }
}

fn trials(config: &Config) -> Result<Vec<(String, Config)>, ExperimentError> {
    let mut out = Vec::new();
    for point in config.axis_points() {
        let label = point_label(&point);
        for &seed in &config.experiment.seeds {
            out.push((label.clone(), config.with_override(&point, seed)?));
        }
    }
    Ok(out)
}

fn status_name(s: &RunStatus) -> String {
    match s {
        RunStatus::Completed => "completed".into(),
        RunStatus::Deadlock { stalled, .. } => format!("deadlock({stalled})"),
        RunStatus::EventBudgetExhausted { .. } => "event_budget".into(),
    }
}

fn engine_err(point: &str, seed: u64) -> impl FnOnce(EngineError) -> ExperimentError + '_ {
    move |source| ExperimentError::Engine { point: point.to_string(), seed, source }
}

/// Runs one configuration and analyses it with `checks` (defaults when `None`).
pub fn run_and_report(
    config: &Config,
    checks: Option<&[String]>,
) -> Result<(crate::engine::PulseTrace<f64>, Report), EngineError> {
    let scenario = config.run.build()?;
    let trace = simulate(&scenario)?;
    let chain = config.run.source == SourceMode::Chain;
    let report = build_report(&scenario.graph, &scenario.params, &trace, checks, chain);
    Ok((trace, report))
}

pub fn sweep(config: &Config, checks: Option<&[String]>) -> Result<Vec<SweepRow>, ExperimentError> {
    let checks = checks.or(config.experiment.checks.as_deref());
    trials(config)?
        .par_iter()
        .map(|(point, cfg)| {
            let (_, r) = run_and_report(cfg, checks).map_err(engine_err(point, cfg.run.seed))?;
            Ok(SweepRow {
                point: point.clone(),
                seed: cfg.run.seed,
                status: status_name(&r.status),
                max_layer_skew: r.max_local_skew,
                overall_skew: r.overall_skew,
                skew_bound: r.skew_bound,
                max_psi: r.max_psi.clone(),
                passed: r.passed,
                failed_checks: r.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect(),
            })
        })
        .collect()
}

/// Per-point summaries of the largest layer skew.
pub fn sweep_summary(rows: &[SweepRow]) -> Vec<Summary> {
    group(rows, |r| &r.point)
        .into_iter()
        .map(|(point, rs)| {
            let v: Vec<Option<f64>> = rs.iter().map(|r| r.max_layer_skew).collect();
            summarize(point, &v, rs.iter().filter(|r| r.passed).count())
        })
        .collect()
}

fn group<R>(rows: &[R], key: impl Fn(&R) -> &String) -> Vec<(&str, Vec<&R>)> {
    let mut out: Vec<(&str, Vec<&R>)> = Vec::new();
    for r in rows {
        let k = key(r).as_str();
        match out.last_mut() {
            Some((last, v)) if *last == k => v.push(r),
            _ => out.push((k, vec![r])),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilizeRow {
    pub point: String,
    pub seed: u64,
    pub nodes: usize,
    /// Stabilization pulse of the uncorrupted run against itself.
    pub clean: Option<u64>,
    pub corrupted: Option<u64>,
    /// `corrupted / sqrt(nodes)`.
    pub ratio: Option<f64>,
}

/// Corruption used when the configuration has none.
pub fn default_corruption(nodes: usize) -> CorruptionSpec {
    CorruptionSpec { spurious_messages: nodes, corrupt_fraction: 1.0 }
}

pub fn stabilize(config: &Config) -> Result<Vec<StabilizeRow>, ExperimentError> {
    trials(config)?
        .par_iter()
        .map(|(point, cfg)| {
            let seed = cfg.run.seed;
            let err = || engine_err(point, seed);
            let mut clean = cfg.run.clone();
            clean.corruption = None;
            let reference = clean.build().map_err(err())?;
            let n = reference.graph.num_nodes();
            let mut dirty = reference.clone();
            dirty.corruption = Some(cfg.run.corruption.clone().unwrap_or_else(|| default_corruption(n)));
            dirty.check_alignment = false;
            let ref_trace = simulate(&reference).map_err(err())?;
            let trace = simulate(&dirty).map_err(err())?;
            let p = &reference.params;
            let clean_pulse = stabilization_pulse(&ref_trace, &ref_trace, p.lambda, p.kappa);
            let corrupted = stabilization_pulse(&trace, &ref_trace, p.lambda, p.kappa);
            Ok(StabilizeRow {
                point: point.clone(),
                seed,
                nodes: n,
                clean: clean_pulse,
                corrupted,
                ratio: corrupted.map(|k| k as f64 / (n as f64).sqrt()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaultTrialRow {
    pub point: String,
    pub seed: u64,
    pub faulty: usize,
    /// Nodes with two or more faulty predecessors.
    pub constraint_violations: usize,
    pub rejected: bool,
    pub status: String,
    pub max_layer_skew: Option<f64>,
    pub skew_bound: f64,
    pub envelope_violations: usize,
    pub period_violations: usize,
}

pub fn faults_mc(config: &Config) -> Result<Vec<FaultTrialRow>, ExperimentError> {
    if config.run.faults.random.is_none() {
        return Err(ExperimentError::Spec("faults-mc needs `faults.probability`".into()));
    }
    trials(config)?
        .par_iter()
        .map(|(point, cfg)| {
            let seed = cfg.run.seed;
            let mut run = cfg.run.clone();
            run.faults.strict = false;
            let scenario = run.build().map_err(engine_err(point, seed))?;
            let violations = validate_placement(&scenario.graph, &scenario.faults.set()).len();
            let rejected = cfg.run.faults.strict && violations > 0;
            let mut row = FaultTrialRow {
                point: point.clone(),
                seed,
                faulty: scenario.faults.nodes.len(),
                constraint_violations: violations,
                rejected,
                status: "rejected".into(),
                max_layer_skew: None,
                skew_bound: 0.0,
                envelope_violations: 0,
                period_violations: 0,
            };
            if rejected {
                return Ok(row);
            }
            let trace = simulate(&scenario).map_err(engine_err(point, seed))?;
            let a = Analysis::new(&scenario.graph, &scenario.params, &trace);
            let d = scenario.graph.base().diameter();
            row.status = status_name(&trace.status);
            row.max_layer_skew = a.local_skew().max_intra();
            row.skew_bound = crate::analysis::skew_bound(scenario.params.kappa, d, trace.faulty.len() as u32);
            row.envelope_violations = a.check_fault_envelope().len();
            row.period_violations = a.period_consistency().len();
            Ok(row)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaultSummary {
    pub skew: Summary,
    pub trials: usize,
    pub rejected: usize,
    pub acceptance_rate: f64,
    pub envelope_violations: usize,
    pub period_violations: usize,
}

pub fn faults_summary(rows: &[FaultTrialRow]) -> Vec<FaultSummary> {
    group(rows, |r| &r.point)
        .into_iter()
        .map(|(point, rs)| {
            let v: Vec<Option<f64>> = rs.iter().map(|r| r.max_layer_skew).collect();
            let ok = rs.iter().filter(|r| !r.rejected && r.max_layer_skew.is_some_and(|x| x <= r.skew_bound)).count();
            let rejected = rs.iter().filter(|r| r.rejected).count();
            FaultSummary {
                skew: summarize(point, &v, ok),
                trials: rs.len(),
                rejected,
                acceptance_rate: 1.0 - rejected as f64 / rs.len() as f64,
                envelope_violations: rs.iter().map(|r| r.envelope_violations).sum(),
                period_violations: rs.iter().map(|r| r.period_violations).sum(),
            }
        })
        .collect()
}

fn num(x: Option<f64>) -> String {
    x.map(fmt_sig17).unwrap_or_default()
}

fn int<N: ToString>(x: Option<N>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_sweep(path: &std::path::Path, rows: &[SweepRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    let levels = rows.iter().map(|r| r.max_psi.len()).max().unwrap_or(0);
    let mut header: Vec<String> =
        ["point", "seed", "status", "max_layer_skew", "overall_skew", "skew_bound"].map(String::from).into();
    header.extend((0..levels).map(|s| format!("max_psi_{s}")));
    header.extend(["passed", "failed_checks"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.point.clone(),
            r.seed.to_string(),
            r.status.clone(),
            num(r.max_layer_skew),
            num(r.overall_skew),
            fmt_sig17(r.skew_bound),
        ];
        rec.extend((0..levels).map(|s| num(r.max_psi.get(s).copied().flatten())));
        rec.push(r.passed.to_string());
        rec.push(r.failed_checks.join(";"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &std::path::Path, rows: &[Summary]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["point", "count", "max", "mean", "p50", "p90", "passed"])?;
    for s in rows {
        w.write_record([
            s.point.clone(),
            s.count.to_string(),
            num(s.max),
            num(s.mean),
            num(s.p50),
            num(s.p90),
            s.passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stabilize(path: &std::path::Path, rows: &[StabilizeRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["point", "seed", "nodes", "clean", "corrupted", "ratio"])?;
    for r in rows {
        w.write_record([
            r.point.clone(),
            r.seed.to_string(),
            r.nodes.to_string(),
            int(r.clean),
            int(r.corrupted),
            num(r.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_faults(path: &std::path::Path, rows: &[FaultTrialRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "point",
        "seed",
        "faulty",
        "constraint_violations",
        "rejected",
        "status",
        "max_layer_skew",
        "skew_bound",
        "envelope_violations",
        "period_violations",
    ])?;
    for r in rows {
        w.write_record([
            r.point.clone(),
            r.seed.to_string(),
            r.faulty.to_string(),
            r.constraint_violations.to_string(),
            r.rejected.to_string(),
            r.status.clone(),
            num(r.max_layer_skew),
            fmt_sig17(r.skew_bound),
            r.envelope_violations.to_string(),
            r.period_violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fault_summary(path: &std::path::Path, rows: &[FaultSummary]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "point",
        "trials",
        "rejected",
        "acceptance_rate",
        "max",
        "mean",
        "p50",
        "p90",
        "within_bound",
        "envelope_violations",
        "period_violations",
    ])?;
    for s in rows {
        w.write_record([
            s.skew.point.clone(),
            s.trials.to_string(),
            s.rejected.to_string(),
            fmt_sig17(s.acceptance_rate),
            num(s.skew.max),
            num(s.skew.mean),
            num(s.skew.p50),
            num(s.skew.p90),
            s.skew.passed.to_string(),
            s.envelope_violations.to_string(),
            s.period_violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    const BASE: &str = r#"
[topology]
kind = "replicated_line"
m = 4
layers = 4
[params]
d = 1.0
u = 0.002
theta = 1.0002
lambda = 2.0
[run]
pulses = 4
"#;

    fn cfg(extra: &str) -> Config {
        Config::parse(&format!("{BASE}{extra}"), Path::new(".")).unwrap()
    }

    #[test]
    fn quantiles_by_rank() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), Some(2.0));
        assert_eq!(quantile(&v, 0.9), Some(4.0));
        assert_eq!(quantile(&v, 0.0), Some(1.0));
        assert_eq!(quantile(&[], 0.5), None);
        let s = summarize("x", &[Some(1.0), None, Some(3.0)], 1);
        assert_eq!((s.count, s.max, s.mean), (3, Some(3.0), Some(2.0)));
    }

    #[test]
    fn sweep_without_axes_is_one_row() {
        let rows = sweep(&cfg(""), None).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].passed, "{rows:?}");
        assert_eq!(rows[0].point, "");
    }

    #[test]
    fn sweep_rows_follow_points_then_seeds() {
        let c = cfg("[experiment]\nseeds = [3, 1]\n[[experiment.axis]]\npath = \"topology.m\"\nvalues = [4, 5]\n");
        let rows = sweep(&c, None).unwrap();
        let keys: Vec<(String, u64)> = rows.iter().map(|r| (r.point.clone(), r.seed)).collect();
        assert_eq!(
            keys,
            vec![("topology.m=4".into(), 3), ("topology.m=4".into(), 1), ("topology.m=5".into(), 3), ("topology.m=5".into(), 1)]
        );
        assert_eq!(sweep(&c, None).unwrap(), rows);
        let s = sweep_summary(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].count, 2);
    }

    #[test]
    fn clean_start_stabilizes_at_once() {
        let rows = stabilize(&cfg("[experiment]\nseeds = [0]\n")).unwrap();
        assert_eq!(rows[0].clean, Some(1));
        let r = &rows[0];
        assert_eq!(r.ratio, r.corrupted.map(|k| k as f64 / (r.nodes as f64).sqrt()));
    }

    #[test]
    fn zero_probability_is_fault_free() {
        let rows = faults_mc(&cfg("[faults]\nprobability = 0.0\n[experiment]\ntrials = 3\n")).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!((r.faulty, r.rejected, r.envelope_violations), (0, false, 0));
            assert!(r.max_layer_skew.unwrap() <= r.skew_bound);
        }
        assert!(faults_mc(&cfg("")).is_err());
    }
}
