//! Trace files.
//!
//! `trace.csv`: `layer,vertex,pulse,time_real,time_local`, one row per pulse of a
//! correct node. `snapshots.csv`: `layer,vertex,pulse,H_own,H_min,H_max,correction,threshold_arm`,
//! empty fields for absent values, arm `1` for the latest-neighbor term and `2`
//! for the own-copy term. Times carry 17 significant digits.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use thiserror::Error;

use crate::analysis::Report;
use crate::engine::{EventKindTag, PulseTrace, RunStatus};
use crate::protocol::{Arm, IterationSnapshot};
use crate::scalar::fmt_sig17;
use crate::topology::{LayeredGraph, NodeId};

pub const TRACE_HEADER: [&str; 5] = ["layer", "vertex", "pulse", "time_real", "time_local"];
pub const SNAPSHOT_HEADER: [&str; 8] =
    ["layer", "vertex", "pulse", "H_own", "H_min", "H_max", "correction", "threshold_arm"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{file} line {line}: {msg}")]
    Format { file: String, line: u64, msg: String },
    #[error("{0} has no rows")]
    Empty(String),
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig17).unwrap_or_default()
}

pub fn write_trace(path: &Path, trace: &PulseTrace<f64>) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for (i, pulses) in trace.pulses.iter().enumerate() {
        let node = trace.node_at(i);
        for (k, p) in pulses.iter().enumerate() {
            w.write_record([
                node.layer.to_string(),
                node.vertex.to_string(),
                (k + 1).to_string(),
                fmt_sig17(p.real),
                fmt_sig17(p.local),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_snapshots(path: &Path, trace: &PulseTrace<f64>) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SNAPSHOT_HEADER)?;
    for (i, snaps) in trace.snapshots.iter().enumerate() {
        let node = trace.node_at(i);
        for (k, s) in snaps.iter().enumerate() {
            let Some(s) = s else { continue };
            w.write_record([
                node.layer.to_string(),
                node.vertex.to_string(),
                (k + 1).to_string(),
                opt(s.h_own),
                opt(s.h_min),
                opt(s.h_max),
                opt(s.correction),
                s.arm.map(|a| (a as u8).to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Emissions of faulty nodes: `layer,vertex,pulse,nominal,time`.
pub fn write_faulty(path: &Path, trace: &PulseTrace<f64>) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "vertex", "pulse", "nominal", "time"])?;
    for e in &trace.emissions {
        w.write_record([
            e.node.layer.to_string(),
            e.node.vertex.to_string(),
            e.pulse.to_string(),
            opt(e.nominal),
            fmt_sig17(e.time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Event log: `time,kind,layer,vertex,peer_layer,peer_vertex`.
pub fn write_events(path: &Path, trace: &PulseTrace<f64>) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "kind", "layer", "vertex", "peer_layer", "peer_vertex"])?;
    for e in &trace.events {
        let kind = match e.kind {
            EventKindTag::Deliver => "deliver",
            EventKindTag::Pulse => "pulse",
            EventKindTag::FaultyEmit => "faulty_emit",
        };
        w.write_record([
            fmt_sig17(e.time),
            kind.to_string(),
            e.node.layer.to_string(),
            e.node.vertex.to_string(),
            e.peer.map(|p| p.layer.to_string()).unwrap_or_default(),
            e.peer.map(|p| p.vertex.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(path: &Path, report: &Report) -> Result<(), TraceError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report, TraceError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

struct Rows {
    name: String,
    reader: csv::Reader<File>,
}

impl Rows {
    fn open(path: &Path, header: &[&str]) -> Result<Self, TraceError> {
        let name = path.display().to_string();
        let mut reader = csv::Reader::from_path(path)?;
        let got: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if got != header {
            return Err(TraceError::Format { file: name, line: 1, msg: format!("expected header `{}`", header.join(",")) });
        }
        Ok(Self { name, reader })
    }

    fn for_each(mut self, mut f: impl FnMut(&csv::StringRecord) -> Result<(), String>) -> Result<usize, TraceError> {
        let mut n = 0;
        for rec in self.reader.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            f(&rec).map_err(|msg| TraceError::Format { file: self.name.clone(), line, msg })?;
            n += 1;
        }
        Ok(n)
    }
}

fn field<F: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<F, String> {
    rec.get(i).unwrap_or("").parse().map_err(|_| format!("bad {name} `{}`", rec.get(i).unwrap_or("")))
}

fn opt_field(rec: &csv::StringRecord, i: usize, name: &str) -> Result<Option<f64>, String> {
    match rec.get(i).unwrap_or("") {
        "" => Ok(None),
        _ => field(rec, i, name).map(Some),
    }
}

fn node_field(graph: &LayeredGraph, rec: &csv::StringRecord) -> Result<(usize, u64), String> {
    let node = NodeId::new(field(rec, 0, "layer")?, field(rec, 1, "vertex")?);
    if !graph.contains(node) {
        return Err(format!("node {node} is not in the graph"));
    }
    let k: u64 = field(rec, 2, "pulse")?;
    if k == 0 {
        return Err("pulse numbers start at 1".into());
    }
    Ok((graph.index(node), k))
}

/// Reads `trace.csv` (and `snapshots.csv` when given) back into a trace.
/// Pulses must appear in order per node. Nodes with fewer than `pulses`
/// pulses that are not in `faulty` mark the run as deadlocked.
pub fn read_trace(
    graph: &LayeredGraph,
    trace_path: &Path,
    snapshot_path: Option<&Path>,
    faulty: BTreeSet<NodeId>,
    pulses: u64,
) -> Result<PulseTrace<f64>, TraceError> {
    let n = graph.num_nodes();
    let mut trace = PulseTrace {
        num_vertices: graph.num_vertices(),
        num_layers: graph.num_layers(),
        pulses: vec![Vec::new(); n],
        snapshots: vec![Vec::new(); n],
        faulty,
        emissions: Vec::new(),
        events: Vec::new(),
        status: RunStatus::Completed,
        events_processed: 0,
    };
    let rows = Rows::open(trace_path, &TRACE_HEADER)?.for_each(|rec| {
        let (i, k) = node_field(graph, rec)?;
        if trace.faulty.contains(&graph.node_at(i)) {
            return Err(format!("pulse recorded for faulty node {}", graph.node_at(i)));
        }
        if trace.pulses[i].len() as u64 + 1 != k {
            return Err(format!("pulse {k} of {} out of order", graph.node_at(i)));
        }
        let real = field(rec, 3, "time_real")?;
        let local = field(rec, 4, "time_local")?;
        trace.pulses[i].push(crate::engine::Pulse { real, local });
        Ok(())
    })?;
    if rows == 0 {
        return Err(TraceError::Empty(trace_path.display().to_string()));
    }
    if let Some(path) = snapshot_path {
        Rows::open(path, &SNAPSHOT_HEADER)?.for_each(|rec| {
            let (i, k) = node_field(graph, rec)?;
            let arm = match rec.get(7).unwrap_or("") {
                "" => None,
                "1" => Some(Arm::Max),
                "2" => Some(Arm::Own),
                other => return Err(format!("bad threshold_arm `{other}`")),
            };
            let pulse_local = trace.pulses[i]
                .get(k as usize - 1)
                .map(|p| p.local)
                .ok_or_else(|| format!("snapshot for missing pulse {k} of {}", graph.node_at(i)))?;
            let snaps = &mut trace.snapshots[i];
            if snaps.len() < k as usize {
                snaps.resize(k as usize, None);
            }
            snaps[k as usize - 1] = Some(IterationSnapshot {
                h_own: opt_field(rec, 3, "H_own")?,
                h_min: opt_field(rec, 4, "H_min")?,
                h_max: opt_field(rec, 5, "H_max")?,
                correction: opt_field(rec, 6, "correction")?,
                arm,
                pulse_local,
            });
            Ok(())
        })?;
    }
    for (snaps, pulses) in trace.snapshots.iter_mut().zip(&trace.pulses) {
        snaps.resize(pulses.len(), None);
    }
    let stalled: Vec<NodeId> = graph
        .nodes()
        .filter(|n| !trace.faulty.contains(n) && (trace.pulses[graph.index(*n)].len() as u64) < pulses)
        .collect();
    if !stalled.is_empty() {
        trace.status = RunStatus::Deadlock { stalled: stalled.len(), first: stalled.into_iter().take(5).collect() };
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::build_report;
    use crate::engine::RunConfig;
    use crate::timing::Params;

    fn run() -> (LayeredGraph, RunConfig<f64>, PulseTrace<f64>) {
        let p = Params::new(1.0, 0.002, 1.0002, 2.0, 2.0).unwrap();
        let cfg = RunConfig::line(4, 5, p, 4, 3);
        let trace = cfg.run().unwrap();
        (cfg.graph().unwrap(), cfg, trace)
    }

    #[test]
    fn trace_round_trip_is_exact() {
        let (g, cfg, trace) = run();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let t = dir.join("trace.csv");
        let s = dir.join("snapshots.csv");
        write_trace(&t, &trace).unwrap();
        write_snapshots(&s, &trace).unwrap();
        let back = read_trace(&g, &t, Some(&s), BTreeSet::new(), cfg.pulses).unwrap();
        assert_eq!(back.pulses, trace.pulses);
        assert_eq!(back.snapshots, trace.snapshots);
        assert_eq!(back.status, RunStatus::Completed);
        let text = std::fs::read_to_string(&t).unwrap();
        assert!(text.starts_with("layer,vertex,pulse,time_real,time_local\n"));
        let r = build_report(&g, &cfg.params, &trace, None, false);
        let rp = dir.join("report.json");
        write_report(&rp, &r).unwrap();
        assert_eq!(read_report(&rp).unwrap(), r);
    }

    #[test]
    fn rejects_bad_rows() {
        let (g, _, _) = run();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let t = dir.join("trace.csv");
        std::fs::write(&t, "layer,vertex,pulse,time_real,time_local\n").unwrap();
        assert!(matches!(read_trace(&g, &t, None, BTreeSet::new(), 1), Err(TraceError::Empty(_))));
        std::fs::write(&t, "layer,vertex,pulse,time_real,time_local\n0,0,2,1.0,1.0\n").unwrap();
        let err = read_trace(&g, &t, None, BTreeSet::new(), 1).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        std::fs::write(&t, "layer,vertex,pulse\n").unwrap();
        assert!(read_trace(&g, &t, None, BTreeSet::new(), 1).is_err());
        std::fs::write(&t, "layer,vertex,pulse,time_real,time_local\n0,0,1,1.0,1.0\n").unwrap();
        let short = read_trace(&g, &t, None, BTreeSet::new(), 1).unwrap();
        assert!(matches!(short.status, RunStatus::Deadlock { .. }));
    }
}
