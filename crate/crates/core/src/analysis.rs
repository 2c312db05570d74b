//! Post-hoc measurements and checkers over pulse traces.
//!
//! Pulses are indexed by wave: pulse `k` of the source reaches layer `l`
//! around real time `(k - 1 + l) lambda`, so a pulse at time `t` on layer `l`
//! belongs to wave `round(t / lambda) - l + 1`. In ideal-source runs the wave
//! of a node's `k`-th pulse is `k`; in chain mode it also absorbs the hop
//! offset of layer 0.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{PulseTrace, RunStatus};
use crate::protocol::IterationSnapshot;
use crate::scalar::Scalar;
use crate::timing::{log2_diameter, Params};
use crate::topology::{LayeredGraph, NodeId, VertexId};

/// Pulses of every node keyed by wave.
#[derive(Clone, Debug)]
pub struct Waves<T> {
    first: i64,
    len: usize,
    cells: Vec<Vec<Option<(T, usize)>>>,
    /// Nodes that produced two pulses in one wave; the later ones are ignored.
    pub collisions: Vec<(NodeId, i64)>,
}

pub fn wave_of<T: Scalar>(time: T, layer: u32, lambda: T) -> i64 {
    (time / lambda).as_f64().round() as i64 - i64::from(layer) + 1
}

impl<T: Scalar> Waves<T> {
    pub fn new(trace: &PulseTrace<T>, lambda: T) -> Self {
        let waves: Vec<Vec<i64>> = trace
            .pulses
            .iter()
            .enumerate()
            .map(|(i, ps)| {
                let layer = trace.node_at(i).layer;
                ps.iter().map(|p| wave_of(p.real, layer, lambda)).collect()
            })
            .collect();
        let first = waves.iter().flatten().copied().min().unwrap_or(1);
        let last = waves.iter().flatten().copied().max().unwrap_or(0);
        let len = usize::try_from(last - first + 1).unwrap_or(0);
        let mut cells = vec![vec![None; len]; trace.pulses.len()];
        let mut collisions = Vec::new();
        for (i, ws) in waves.iter().enumerate() {
            for (j, &w) in ws.iter().enumerate() {
                let cell = &mut cells[i][(w - first) as usize];
                if cell.is_some() {
                    collisions.push((trace.node_at(i), w));
                } else {
                    *cell = Some((trace.pulses[i][j].real, j));
                }
            }
        }
        Self { first, len, cells, collisions }
    }

    pub fn range(&self) -> std::ops::Range<i64> {
        self.first..self.first + self.len as i64
    }

    /// Real time of `index`'s pulse in wave `wave`.
    pub fn time(&self, index: usize, wave: i64) -> Option<T> {
        self.entry(index, wave).map(|(t, _)| t)
    }

    /// Position of that pulse in the node's own pulse list.
    pub fn pulse_index(&self, index: usize, wave: i64) -> Option<usize> {
        self.entry(index, wave).map(|(_, j)| j)
    }

    fn entry(&self, index: usize, wave: i64) -> Option<(T, usize)> {
        let off = usize::try_from(wave - self.first).ok()?;
        self.cells.get(index)?.get(off).copied().flatten()
    }
}

/// A pair of nodes attaining a maximum, with the wave.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness<T> {
    pub value: T,
    pub a: NodeId,
    pub b: NodeId,
    pub wave: i64,
}

fn keep_max<T: Scalar>(slot: &mut Option<Witness<T>>, w: Witness<T>) {
    if slot.as_ref().is_none_or(|cur| w.value > cur.value) {
        *slot = Some(w);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkewSummary<T> {
    /// `L_l` per layer; `None` when no adjacent correct pair has pulses.
    pub intra: Vec<Option<Witness<T>>>,
    /// `L_{l,l+1}` per layer `l < layers - 1`, matching wave `k + 1` on `l` with wave `k` on `l + 1`.
    pub inter: Vec<Option<Witness<T>>>,
    /// Worst intra-layer adjacent offset over all layers, per wave.
    pub per_wave: Vec<(i64, T)>,
}

impl<T: Scalar> SkewSummary<T> {
    pub fn max_intra(&self) -> Option<T> {
        self.intra.iter().flatten().map(|w| w.value).reduce(T::max_of)
    }

    /// `L`: the largest of all intra- and inter-layer skews.
    pub fn overall(&self) -> Option<T> {
        self.intra.iter().chain(&self.inter).flatten().map(|w| w.value).reduce(T::max_of)
    }
}

/// Largest `|t_v - t_w|` over adjacent `v`, `w` that both have a time.
pub fn layer_skew<T: Scalar>(graph: &LayeredGraph, times: &[Option<T>]) -> Option<(T, VertexId, VertexId)> {
    let mut best: Option<(T, VertexId, VertexId)> = None;
    for (v, w) in graph.base().edges() {
        if let (Some(a), Some(b)) = (times[v as usize], times[w as usize]) {
            let x = (a - b).abs_val();
            if best.is_none_or(|(y, _, _)| x > y) {
                best = Some((x, v, w));
            }
        }
    }
    best
}

/// Per-layer and per-wave potentials, indexed `[s][layer][wave - first]`.
#[derive(Clone, Debug, Serialize)]
pub struct PotentialTable<T> {
    pub first_wave: i64,
    pub psi: Vec<Vec<Vec<Option<Witness<T>>>>>,
    pub xi: Vec<Vec<Vec<Option<Witness<T>>>>>,
}

impl<T: Scalar> PotentialTable<T> {
    pub fn s_max(&self) -> u32 {
        self.psi.len() as u32 - 1
    }

    pub fn psi(&self, s: u32, layer: u32, wave: i64) -> Option<T> {
        Self::get(&self.psi, self.first_wave, s, layer, wave)
    }

    pub fn xi(&self, s: u32, layer: u32, wave: i64) -> Option<T> {
        Self::get(&self.xi, self.first_wave, s, layer, wave)
    }

    fn get(t: &[Vec<Vec<Option<Witness<T>>>>], first: i64, s: u32, layer: u32, wave: i64) -> Option<T> {
        let off = usize::try_from(wave - first).ok()?;
        t.get(s as usize)?.get(layer as usize)?.get(off)?.as_ref().map(|w| w.value)
    }

    /// Largest `Psi^s` over layers and waves.
    pub fn max_psi(&self, s: u32) -> Option<T> {
        self.psi[s as usize].iter().flatten().flatten().map(|w| w.value).reduce(T::max_of)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Condition {
    Slow(u32),
    Fast(u32),
    Jump,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Slow(s) => write!(f, "SC({s})"),
            Self::Fast(s) => write!(f, "FC({s})"),
            Self::Jump => write!(f, "JC"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionVerdict<T> {
    pub node: NodeId,
    pub wave: i64,
    pub condition: Condition,
    /// First disjunct that holds (1..=3), if any.
    pub satisfied_by: Option<u8>,
    pub correction: T,
    /// Smallest violation margin among the disjuncts; positive means failure.
    pub slack: T,
}

impl<T: Scalar> ConditionVerdict<T> {
    pub fn passed(&self) -> bool {
        self.satisfied_by.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport<T> {
    pub checked: usize,
    pub failures: Vec<ConditionVerdict<T>>,
}

/// A single out-of-bounds observation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation<T> {
    pub node: NodeId,
    pub wave: i64,
    pub value: T,
    pub lower: Option<T>,
    pub upper: Option<T>,
}

impl<T: Scalar> fmt::Display for Violation<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} wave {}: {} outside [", self.node, self.wave, self.value)?;
        match self.lower {
            Some(x) => write!(f, "{x}, ")?,
            None => write!(f, "-inf, ")?,
        }
        match self.upper {
            Some(x) => write!(f, "{x}]"),
            None => write!(f, "inf]"),
        }
    }
}

fn bounds_violation<T: Scalar>(node: NodeId, wave: i64, value: T, lower: T, upper: T) -> Option<Violation<T>> {
    (value < lower || value > upper).then_some(Violation { node, wave, value, lower: Some(lower), upper: Some(upper) })
}

/// Failed instance of the layer-window potential inequality.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsiBoundViolation<T> {
    pub s: u32,
    pub low: u32,
    pub high: u32,
    pub wave: i64,
    pub psi_high: T,
    pub bound: T,
}

/// Borrowed view of a trace together with its topology and parameters.
pub struct Analysis<'a, T> {
    pub graph: &'a LayeredGraph,
    pub params: &'a Params<T>,
    pub trace: &'a PulseTrace<T>,
    pub waves: Waves<T>,
}

impl<'a, T: Scalar> Analysis<'a, T> {
    pub fn new(graph: &'a LayeredGraph, params: &'a Params<T>, trace: &'a PulseTrace<T>) -> Self {
        Self { graph, params, trace, waves: Waves::new(trace, params.lambda) }
    }

    fn correct(&self, node: NodeId) -> bool {
        self.trace.is_correct(node)
    }

    fn time(&self, node: NodeId, wave: i64) -> Option<T> {
        if !self.correct(node) {
            return None;
        }
        self.waves.time(self.graph.index(node), wave)
    }

    fn snapshot(&self, node: NodeId, wave: i64) -> Option<&IterationSnapshot<T>> {
        let i = self.graph.index(node);
        let j = self.waves.pulse_index(i, wave)?;
        self.trace.snapshots[i].get(j)?.as_ref()
    }

    fn layer_times(&self, layer: u32, wave: i64) -> Vec<Option<T>> {
        (0..self.graph.num_vertices()).map(|v| self.time(NodeId::new(layer, v as VertexId), wave)).collect()
    }

    fn layer_is_correct(&self, layer: u32) -> bool {
        !self.trace.faulty.iter().any(|n| n.layer == layer)
    }

    pub fn local_skew(&self) -> SkewSummary<T> {
        let layers = self.graph.num_layers();
        let mut intra = vec![None; layers as usize];
        let mut inter = vec![None; layers.saturating_sub(1) as usize];
        let mut per_wave = Vec::new();
        for wave in self.waves.range() {
            let mut worst: Option<T> = None;
            for l in 0..layers {
                let times = self.layer_times(l, wave);
                if let Some((x, v, w)) = layer_skew(self.graph, &times) {
                    worst = Some(worst.map_or(x, |y| y.max_of(x)));
                    let wit = Witness { value: x, a: NodeId::new(l, v), b: NodeId::new(l, w), wave };
                    keep_max(&mut intra[l as usize], wit);
                }
                if l + 1 < layers {
                    for node in self.graph.nodes().filter(|n| n.layer == l) {
                        let Some(a) = self.time(node, wave + 1) else { continue };
                        for (succ, _) in self.graph.successors(node) {
                            if let Some(b) = self.time(succ, wave) {
                                let wit = Witness { value: (a - b).abs_val(), a: node, b: succ, wave };
                                keep_max(&mut inter[l as usize], wit);
                            }
                        }
                    }
                }
            }
            if let Some(x) = worst {
                per_wave.push((wave, x));
            }
        }
        SkewSummary { intra, inter, per_wave }
    }

    /// `Psi^s` and `Xi^s` for `s = 0..=s_max` over correct nodes.
    pub fn potentials(&self, s_max: u32) -> PotentialTable<T> {
        let base = self.graph.base();
        let n = self.graph.num_vertices();
        let kappa = self.params.kappa;
        let layers = self.graph.num_layers() as usize;
        let waves: Vec<i64> = self.waves.range().collect();
        let mut psi = vec![vec![vec![None; waves.len()]; layers]; s_max as usize + 1];
        let mut xi = psi.clone();
        for l in 0..layers as u32 {
            for (wi, &wave) in waves.iter().enumerate() {
                let times = self.layer_times(l, wave);
                for s in 0..=s_max {
                    let step_psi = T::from_count(4 * u64::from(s)) * kappa;
                    let step_xi = T::from_count(4 * u64::from(s)) * kappa - T::lit(2.0) * kappa;
                    let mut best_psi: Option<Witness<T>> = None;
                    let mut best_xi: Option<Witness<T>> = None;
                    for v in 0..n {
                        let Some(tv) = times[v] else { continue };
                        for w in 0..n {
                            let Some(tw) = times[w] else { continue };
                            let dist = T::from_count(u64::from(base.distance(v as VertexId, w as VertexId)));
                            let a = NodeId::new(l, v as VertexId);
                            let b = NodeId::new(l, w as VertexId);
                            keep_max(&mut best_psi, Witness { value: tv - tw - step_psi * dist, a, b, wave });
                            keep_max(&mut best_xi, Witness { value: tv - tw - step_xi * dist, a, b, wave });
                        }
                    }
                    psi[s as usize][l as usize][wi] = best_psi;
                    xi[s as usize][l as usize][wi] = best_xi;
                }
            }
        }
        PotentialTable { first_wave: self.waves.first, psi, xi }
    }

    /// Correct predecessors' pulse times in `wave`: own copy, then neighbor extremes.
    fn predecessor_times(&self, node: NodeId, wave: i64) -> Option<(T, T, T)> {
        let below = node.layer.checked_sub(1)?;
        let own = self.time(NodeId::new(below, node.vertex), wave)?;
        let mut lo: Option<T> = None;
        let mut hi: Option<T> = None;
        for &w in self.graph.base().neighbors(node.vertex) {
            let t = self.time(NodeId::new(below, w), wave)?;
            lo = Some(lo.map_or(t, |x| x.min_of(t)));
            hi = Some(hi.map_or(t, |x| x.max_of(t)));
        }
        Some((own, lo?, hi?))
    }

    /// SC(s) for `s <= s_max`, FC(s) for `1 <= s <= s_max` and JC, at correct
    /// nodes whose whole predecessor layer is correct. FC and JC start at layer 2.
    pub fn check_conditions(&self, s_max: u32) -> ConditionReport<T> {
        let p = self.params;
        let (kappa, theta) = (p.kappa, p.theta);
        let zero = T::zero();
        let mut report = ConditionReport { checked: 0, failures: Vec::new() };
        for node in self.graph.nodes().filter(|n| n.layer > 0 && self.correct(*n)) {
            if !self.layer_is_correct(node.layer - 1) {
                continue;
            }
            for wave in self.waves.range() {
                let Some(c) = self.snapshot(node, wave).and_then(|s| s.correction) else { continue };
                let Some((own, t_min, t_max)) = self.predecessor_times(node, wave) else { continue };
                let mut verdicts = Vec::new();
                for s in 0..=s_max {
                    let step = T::from_count(4 * u64::from(s)) * kappa;
                    // SC-1, SC-2 in product form: C <= theta * rhs
                    let m1 = c - theta * (own - t_max + step);
                    let m2 = c - theta * (own - t_min - step);
                    let m3 = c;
                    verdicts.push((Condition::Slow(s), [m1, m2, m3]));
                    if s >= 1 && node.layer >= 2 {
                        let fstep = step - T::lit(2.0) * kappa;
                        let f1 = own - t_max + fstep + kappa - c;
                        let f2 = own - t_min - fstep + kappa - c;
                        let f3 = kappa - c;
                        verdicts.push((Condition::Fast(s), [f1, f2, f3]));
                    }
                }
                if node.layer >= 2 {
                    // JC-1: kappa < C/theta <= own - t_max - kappa
                    let j1 = if theta * kappa < c { c - theta * (own - t_max - kappa) } else { theta * kappa - c };
                    // JC-2: 0 > C >= own - t_min + kappa
                    let j2 = if c < zero { own - t_min + kappa - c } else { c };
                    // JC-3: 0 <= C/theta <= kappa
                    let j3 = (zero - c).max_of(c - theta * kappa);
                    verdicts.push((Condition::Jump, [j1, j2, j3]));
                }
                for (condition, margins) in verdicts {
                    report.checked += 1;
                    let satisfied_by = margins.iter().position(|&m| m <= zero).map(|i| i as u8 + 1);
                    if satisfied_by.is_none() {
                        let slack = margins.iter().copied().reduce(T::min_of).unwrap_or(zero);
                        report.failures.push(ConditionVerdict {
                            node,
                            wave,
                            condition,
                            satisfied_by,
                            correction: c,
                            slack,
                        });
                    }
                }
            }
        }
        report
    }

    /// `d - u + (lambda - d - C)/theta <= t_v - t_own <= lambda - C` at correct
    /// nodes with a correct own predecessor.
    pub fn check_drift(&self) -> Vec<Violation<T>> {
        let p = self.params;
        let mut out = Vec::new();
        for node in self.graph.nodes().filter(|n| n.layer > 0 && self.correct(*n)) {
            let own = NodeId::new(node.layer - 1, node.vertex);
            for wave in self.waves.range() {
                let (Some(t), Some(t0)) = (self.time(node, wave), self.time(own, wave)) else { continue };
                let Some(c) = self.snapshot(node, wave).and_then(|s| s.correction) else { continue };
                let gap = t - t0;
                let upper = p.lambda - c;
                let lower_ok = p.theta * (gap - p.min_delay()) >= p.forward_wait() - c;
                if gap > upper || !lower_ok {
                    let lower = p.min_delay() + (p.forward_wait() - c) / p.theta;
                    out.push(Violation { node, wave, value: gap, lower: Some(lower), upper: Some(upper) });
                }
            }
        }
        out
    }

    /// Pulse times of correct nodes with a faulty predecessor lie in
    /// `[t_min + lambda - 2 kappa, t_max + lambda + 2 kappa]` over correct predecessors.
    pub fn check_fault_envelope(&self) -> Vec<Violation<T>> {
        let p = self.params;
        let two_k = T::lit(2.0) * p.kappa;
        let mut out = Vec::new();
        for node in self.graph.nodes().filter(|n| n.layer > 0 && self.correct(*n)) {
            let preds = self.graph.predecessors(node);
            if preds.iter().all(|n| self.correct(*n)) {
                continue;
            }
            for wave in self.waves.range() {
                let Some(t) = self.time(node, wave) else { continue };
                let times: Vec<T> = preds.iter().filter_map(|&n| self.time(n, wave)).collect();
                let (Some(lo), Some(hi)) =
                    (times.iter().copied().reduce(T::min_of), times.iter().copied().reduce(T::max_of))
                else {
                    continue;
                };
                out.extend(bounds_violation(node, wave, t, lo + p.lambda - two_k, hi + p.lambda + two_k));
            }
        }
        out
    }

    /// Local estimate errors at nodes whose predecessors are all correct:
    /// `H_own - H_max - kappa/2` within `[t_own - t_max - kappa, t_own - t_max]`, same for `H_min`.
    pub fn check_estimates(&self) -> Vec<Violation<T>> {
        let p = self.params;
        let half = p.kappa / T::lit(2.0);
        let mut out = Vec::new();
        for node in self.graph.nodes().filter(|n| n.layer > 0 && self.correct(*n)) {
            if !self.graph.predecessors(node).iter().all(|n| self.correct(*n)) {
                continue;
            }
            for wave in self.waves.range() {
                let Some(s) = self.snapshot(node, wave) else { continue };
                let Some((own, t_min, t_max)) = self.predecessor_times(node, wave) else { continue };
                let Some(h_own) = s.h_own else { continue };
                for (h, t_ext) in [(s.h_max, t_max), (s.h_min, t_min)] {
                    let Some(h) = h else { continue };
                    let est = h_own - h - half;
                    let truth = own - t_ext;
                    out.extend(bounds_violation(node, wave, est, truth - p.kappa, truth));
                }
            }
        }
        out
    }

    /// Waves in which every correct node pulsed.
    pub fn complete_waves(&self) -> Vec<i64> {
        self.waves
            .range()
            .filter(|&w| self.graph.nodes().filter(|n| self.correct(*n)).all(|n| self.time(n, w).is_some()))
            .collect()
    }

    /// `t^{k+1} = t^k + lambda` within `1e-9 lambda` over consecutive complete
    /// waves, skipping the first pair.
    pub fn period_consistency(&self) -> Vec<Violation<T>> {
        let lambda = self.params.lambda;
        let tol = lambda * T::lit(1e-9);
        let complete = self.complete_waves();
        let pairs: Vec<i64> = complete.windows(2).filter(|w| w[1] == w[0] + 1).map(|w| w[0]).skip(1).collect();
        let mut out = Vec::new();
        for node in self.graph.nodes().filter(|n| self.correct(*n)) {
            for &wave in &pairs {
                let (Some(a), Some(b)) = (self.time(node, wave), self.time(node, wave + 1)) else { continue };
                out.extend(bounds_violation(node, wave, b - a, lambda - tol, lambda + tol));
            }
        }
        out
    }

    /// Layer-window inequality for `Psi^s` on every `(low, high)` with
    /// `low <= high` in `layers` and every `s` in `1..=s_max`.
    pub fn check_psi_bound(&self, table: &PotentialTable<T>, layers: &[u32]) -> Vec<PsiBoundViolation<T>> {
        let kappa = self.params.kappa;
        let half = kappa / T::lit(2.0);
        let mut out = Vec::new();
        for s in 1..=table.s_max() {
            for wave in self.waves.range() {
                for &low in layers {
                    let Some(xi) = table.xi(s, low, wave) else { continue };
                    for &high in layers.iter().filter(|&&h| h >= low) {
                        let Some(psi) = table.psi(s, high, wave) else { continue };
                        let span = u64::from(high - low);
                        let bound = (xi - T::from_count(span + 1) * kappa).max_of(T::zero()) + T::from_count(span) * half;
                        if psi > bound {
                            out.push(PsiBoundViolation { s, low, high, wave, psi_high: psi, bound });
                        }
                    }
                }
            }
        }
        out
    }

    /// `L_l <= Psi^s(l) + 4 s kappa` for every layer, wave and `s`.
    pub fn check_skew_vs_potential(&self, table: &PotentialTable<T>) -> Vec<Violation<T>> {
        let kappa = self.params.kappa;
        let mut out = Vec::new();
        for l in 0..self.graph.num_layers() {
            for wave in self.waves.range() {
                let Some((x, v, _)) = layer_skew(self.graph, &self.layer_times(l, wave)) else { continue };
                for s in 0..=table.s_max() {
                    let Some(psi) = table.psi(s, l, wave) else { continue };
                    let upper = psi + T::from_count(4 * u64::from(s)) * kappa;
                    if x > upper {
                        out.push(Violation { node: NodeId::new(l, v), wave, value: x, lower: None, upper: Some(upper) });
                    }
                }
            }
        }
        out
    }

    /// Layer-0 chain: `t^k_i` in `[(k+i-1) lambda - i kappa/2, (k+i-1) lambda]`
    /// for hop index `i`, and offsets across chain links within `kappa/2`.
    pub fn check_chain(&self) -> Vec<Violation<T>> {
        let p = self.params;
        let half = p.kappa / T::lit(2.0);
        let Some(chain) = self.graph.base().chain() else { return Vec::new() };
        let mut out = Vec::new();
        for v in 0..self.graph.num_vertices() as VertexId {
            let node = NodeId::new(0, v);
            let Some(hop) = chain.hop_index(v) else { continue };
            let i = self.graph.index(node);
            for (k, pulse) in self.trace.pulses[i].iter().enumerate() {
                let slot = T::from_count(k as u64 + hop as u64) * p.lambda;
                let lower = slot - T::from_count(hop as u64) * half;
                out.extend(bounds_violation(node, k as i64 + 1, pulse.real, lower, slot));
            }
        }
        let mut links: Vec<(VertexId, VertexId)> = chain.order.windows(2).map(|w| (w[0], w[1])).collect();
        if let Some(&pen) = chain.order.iter().rev().nth(1) {
            links.extend(chain.end_replicas.iter().map(|&e| (pen, e)));
        }
        for wave in self.waves.range() {
            for &(a, b) in &links {
                let (Some(ta), Some(tb)) = (self.time(NodeId::new(0, a), wave), self.time(NodeId::new(0, b), wave))
                else {
                    continue;
                };
                let x = (ta - tb).abs_val();
                if x > half {
                    out.push(Violation { node: NodeId::new(0, b), wave, value: x, lower: None, upper: Some(half) });
                }
            }
        }
        out
    }
}

/// First pulse index from which every correct node's pulses match the
/// reference run within `tolerance`, one to one. `None` if some node is still
/// off at its last reference pulse.
pub fn stabilization_pulse<T: Scalar>(trace: &PulseTrace<T>, reference: &PulseTrace<T>, lambda: T, tolerance: T) -> Option<u64> {
    let half = lambda / T::lit(2.0);
    let mut worst = 0usize;
    for (i, refs) in reference.pulses.iter().enumerate() {
        if refs.is_empty() || !trace.is_correct(trace.node_at(i)) {
            continue;
        }
        let got = &trace.pulses[i];
        let r_first = refs[0].real;
        let r_last = refs[refs.len() - 1].real;
        let mut bad = BTreeSet::new();
        let mut matched = vec![false; refs.len()];
        for p in got.iter().filter(|p| p.real >= r_first - half && p.real <= r_last + half) {
            let j = nearest(refs, p.real);
            if (p.real - refs[j].real).abs_val() <= tolerance && !matched[j] {
                matched[j] = true;
            } else {
                bad.insert(j);
            }
        }
        bad.extend(matched.iter().enumerate().filter(|(_, m)| !**m).map(|(j, _)| j));
        if let Some(&j) = bad.last() {
            if j + 1 == refs.len() {
                return None;
            }
            worst = worst.max(j + 1);
        }
    }
    Some(worst as u64 + 1)
}

fn nearest<T: Scalar>(refs: &[crate::engine::Pulse<T>], t: T) -> usize {
    let j = refs.partition_point(|p| p.real < t);
    if j == 0 {
        return 0;
    }
    if j == refs.len() {
        return j - 1;
    }
    if (t - refs[j - 1].real) <= (refs[j].real - t) { j - 1 } else { j }
}

/// Local-skew bound for `faults` worst-case placed faults on distinct
/// layers: `4 kappa (2 + log2 D)`, times `5^f * 5/4` when `f > 0`.
pub fn skew_bound(kappa: f64, diameter: u32, faults: u32) -> f64 {
    let base = 4.0 * kappa * (2.0 + log2_diameter(diameter));
    if faults == 0 {
        base
    } else {
        base * 5f64.powi(faults as i32) * 1.25
    }
}

/// Default condition range: `ceil(log2 D) + 1`.
pub fn default_s_max(diameter: u32) -> u32 {
    log2_diameter(diameter).ceil() as u32 + 1
}

/// Largest `s` with `2^s <= D`.
pub fn floor_log2(diameter: u32) -> u32 {
    diameter.max(1).ilog2()
}

pub const SCHEMA_VERSION: u32 = 1;

/// Names accepted by `--checks`.
pub const CHECK_NAMES: &[&str] =
    &["completion", "skew", "conditions", "drift", "estimates", "envelope", "period", "potentials", "chain"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub checked: usize,
    pub violations: usize,
    /// First few violations, human readable.
    pub examples: Vec<String>,
}

impl CheckOutcome {
    fn new<I: IntoIterator<Item = String>>(name: &str, checked: usize, violations: usize, examples: I) -> Self {
        Self {
            name: name.into(),
            passed: violations == 0,
            checked,
            violations,
            examples: examples.into_iter().take(10).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSkew {
    pub layer: u32,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub status: RunStatus,
    pub nodes: usize,
    pub faulty: Vec<NodeId>,
    pub kappa: f64,
    pub diameter: u32,
    pub max_local_skew: Option<f64>,
    pub overall_skew: Option<f64>,
    pub skew_bound: f64,
    pub layers: Vec<LayerSkew>,
    pub max_psi: Vec<Option<f64>>,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

fn show<D: fmt::Display>(items: &[D]) -> Vec<String> {
    items.iter().take(10).map(ToString::to_string).collect()
}

/// Checks run when none are requested. The correction conditions and the
/// estimate bounds are only guaranteed without faults, so faulty runs skip them.
pub fn default_checks(faulty: bool) -> Vec<&'static str> {
    CHECK_NAMES.iter().copied().filter(|c| !faulty || !matches!(*c, "conditions" | "estimates")).collect()
}

/// Runs the selected checks ([`default_checks`] when `checks` is `None`).
/// The chain check only runs when layer 0 was driven by the chain source.
pub fn build_report<T: Scalar>(
    graph: &LayeredGraph,
    params: &Params<T>,
    trace: &PulseTrace<T>,
    checks: Option<&[String]>,
    chain_source: bool,
) -> Report {
    let a = Analysis::new(graph, params, trace);
    let diameter = graph.base().diameter();
    let defaults = default_checks(!trace.faulty.is_empty());
    let enabled = |name: &str| match checks {
        Some(c) => c.iter().any(|x| x == name),
        None => defaults.contains(&name),
    };
    let faults = trace.faulty.len() as u32;
    let kappa = params.kappa.as_f64();
    let bound = skew_bound(kappa, diameter, faults);
    let skew = a.local_skew();
    let s_max = default_s_max(diameter);
    let table = enabled("potentials").then(|| a.potentials(s_max));
    let mut out = Vec::new();
    if enabled("completion") {
        let ok = trace.status == RunStatus::Completed;
        let mut c = CheckOutcome::new("completion", 1, usize::from(!ok), [format!("{:?}", trace.status)]);
        if ok {
            c.examples.clear();
        }
        out.push(c);
    }
    if enabled("skew") {
        let bad: Vec<String> = skew
            .intra
            .iter()
            .enumerate()
            .filter_map(|(l, w)| w.as_ref().map(|w| (l, w)))
            .filter(|(_, w)| w.value.as_f64() > bound)
            .map(|(l, w)| format!("layer {l}: {} between {} and {} in wave {}", w.value, w.a, w.b, w.wave))
            .collect();
        out.push(CheckOutcome::new("skew", skew.intra.len(), bad.len(), bad));
    }
    if enabled("conditions") {
        let r = a.check_conditions(s_max);
        let ex = r
            .failures
            .iter()
            .map(|f| format!("{} wave {}: {} fails with C = {} (margin {})", f.node, f.wave, f.condition, f.correction, f.slack));
        out.push(CheckOutcome::new("conditions", r.checked, r.failures.len(), ex));
    }
    if enabled("drift") {
        let v = a.check_drift();
        out.push(CheckOutcome::new("drift", graph.num_nodes(), v.len(), show(&v)));
    }
    if enabled("estimates") {
        let v = a.check_estimates();
        out.push(CheckOutcome::new("estimates", graph.num_nodes(), v.len(), show(&v)));
    }
    if enabled("envelope") {
        let v = a.check_fault_envelope();
        out.push(CheckOutcome::new("envelope", graph.num_nodes(), v.len(), show(&v)));
    }
    if enabled("period") {
        let v = a.period_consistency();
        out.push(CheckOutcome::new("period", graph.num_nodes(), v.len(), show(&v)));
    }
    if let Some(table) = &table {
        let layers: Vec<u32> = (0..graph.num_layers()).collect();
        let mut ex = Vec::new();
        let mut bad = 0;
        if trace.faulty.is_empty() {
            let psi = a.check_psi_bound(table, &layers);
            bad += psi.len();
            ex.extend(psi.iter().map(|v| {
                format!("s={} layers {}..{} wave {}: {} > {}", v.s, v.low, v.high, v.wave, v.psi_high, v.bound)
            }));
        }
        let obs = a.check_skew_vs_potential(table);
        bad += obs.len();
        ex.extend(show(&obs));
        out.push(CheckOutcome::new("potentials", layers.len(), bad, ex));
    }
    if enabled("chain") && chain_source {
        let v = a.check_chain();
        out.push(CheckOutcome::new("chain", graph.num_vertices(), v.len(), show(&v)));
    }
    let layers = (0..graph.num_layers())
        .map(|l| LayerSkew {
            layer: l,
            intra: skew.intra[l as usize].as_ref().map(|w| w.value.as_f64()),
            inter: skew.inter.get(l as usize).and_then(|w| w.as_ref()).map(|w| w.value.as_f64()),
        })
        .collect();
    let passed = out.iter().all(|c| c.passed);
    Report {
        schema_version: SCHEMA_VERSION,
        status: trace.status.clone(),
        nodes: graph.num_nodes(),
        faulty: trace.faulty.iter().copied().collect(),
        kappa,
        diameter,
        max_local_skew: skew.max_intra().map(Scalar::as_f64),
        overall_skew: skew.overall().map(Scalar::as_f64),
        skew_bound: bound,
        layers,
        max_psi: table.map_or_else(Vec::new, |t| (0..=t.s_max()).map(|s| t.max_psi(s).map(Scalar::as_f64)).collect()),
        checks: out,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Pulse;
    use crate::topology::BaseGraph;
    use num_rational::Ratio;
    use proptest::prelude::*;

    type R = Ratio<i64>;

    fn r(n: i64, d: i64) -> R {
        R::new(n, d)
    }

    fn params(kappa: R) -> Params<R> {
        Params { d: r(1, 1), u: r(1, 500), theta: r(5001, 5000), lambda: r(2, 1), kappa, c: r(2, 1) }
    }

    /// One pulse per node, at `times[layer][vertex]`.
    fn trace(graph: &LayeredGraph, times: &[Vec<Option<R>>], correction: Option<R>) -> PulseTrace<R> {
        let n = graph.num_nodes();
        let mut t = PulseTrace {
            num_vertices: graph.num_vertices(),
            num_layers: graph.num_layers(),
            pulses: vec![Vec::new(); n],
            snapshots: vec![Vec::new(); n],
            faulty: BTreeSet::new(),
            emissions: Vec::new(),
            events: Vec::new(),
            status: RunStatus::Completed,
            events_processed: 0,
        };
        for (l, row) in times.iter().enumerate() {
            for (v, time) in row.iter().enumerate() {
                let i = graph.index(NodeId::new(l as u32, v as VertexId));
                match time {
                    Some(x) => {
                        t.pulses[i].push(Pulse { real: *x, local: *x });
                        t.snapshots[i].push(correction.map(|c| IterationSnapshot {
                            h_own: None,
                            h_min: None,
                            h_max: None,
                            correction: Some(c),
                            arm: None,
                            pulse_local: *x,
                        }));
                    }
                    None => {
                        t.faulty.insert(NodeId::new(l as u32, v as VertexId));
                    }
                }
            }
        }
        t
    }

    fn triangle(layers: u32) -> LayeredGraph {
        LayeredGraph::new(BaseGraph::from_edges(&[(0, 1), (1, 2), (2, 0)]).unwrap(), layers).unwrap()
    }

    #[test]
    fn layer_skew_on_a_cycle() {
        let g = LayeredGraph::new(BaseGraph::from_edges(&[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]).unwrap(), 1)
            .unwrap();
        let times = [0.10f64, 0.00, 0.05, 0.05, 0.05, 0.05].map(Some);
        let oracle = g
            .base()
            .edges()
            .map(|(v, w)| (times[v as usize].unwrap() - times[w as usize].unwrap()).abs())
            .fold(0.0, f64::max);
        let (x, _, _) = layer_skew(&g, &times).unwrap();
        assert_eq!(x, 0.10);
        assert_eq!(x, oracle);
        assert_eq!(layer_skew(&g, &[Some(1.0); 6]).unwrap().0, 0.0);
    }

    #[test]
    fn potential_of_two_offset_nodes() {
        let g = triangle(1);
        let t = trace(&g, &[vec![Some(r(101, 10)), Some(r(10, 1)), Some(r(10, 1))]], None);
        let p = params(r(1, 100));
        let table = Analysis::new(&g, &p, &t).potentials(2);
        assert_eq!(table.max_psi(1), Some(r(6, 100)));
        assert_eq!(table.max_psi(0), Some(r(1, 10)));
        assert_eq!(table.max_psi(2), Some(r(2, 100)));
        let flat = trace(&g, &[vec![Some(r(10, 1)); 3]], None);
        let table = Analysis::new(&g, &p, &flat).potentials(2);
        assert!((0..=2).all(|s| table.max_psi(s) == Some(r(0, 1))));
    }

    #[test]
    fn envelope_bounds() {
        let g = triangle(2);
        let kappa = r(44, 10000);
        let p = params(kappa);
        let below = [vec![Some(r(10, 1)), Some(r(1005, 100)), None], vec![Some(r(1199, 100)); 3]];
        let v = Analysis::new(&g, &p, &trace(&g, &below, None)).check_fault_envelope();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0].lower, Some(r(119912, 10000)));
        assert_eq!(v[0].upper, Some(r(120588, 10000)));
        let inside = [vec![Some(r(10, 1)), Some(r(1005, 100)), None], vec![Some(r(12, 1)); 3]];
        assert!(Analysis::new(&g, &p, &trace(&g, &inside, None)).check_fault_envelope().is_empty());
    }

    fn condition_failures(c: R, times: &[Vec<Option<R>>]) -> Vec<Condition> {
        let g = triangle(3);
        let p = params(r(1, 100));
        let t = trace(&g, times, Some(c));
        Analysis::new(&g, &p, &t).check_conditions(3).failures.into_iter().map(|f| f.condition).collect()
    }

    fn spread_times() -> Vec<Vec<Option<R>>> {
        (0..3).map(|l| (0..3).map(|v| Some(r(200 * l + 3 * v * v, 100))).collect()).collect()
    }

    #[test]
    fn trivially_satisfied_conditions() {
        let t = spread_times();
        assert!(!condition_failures(r(0, 1), &t).iter().any(|c| matches!(c, Condition::Slow(_) | Condition::Jump)));
        assert!(!condition_failures(r(1, 100), &t).iter().any(|c| matches!(c, Condition::Fast(_) | Condition::Jump)));
        assert!(!condition_failures(r(1, 200), &t).iter().any(|c| matches!(c, Condition::Jump)));
    }

    #[test]
    fn clean_run_stabilizes_at_once() {
        let g = triangle(2);
        let t = trace(&g, &spread_times()[..2], None);
        assert_eq!(stabilization_pulse(&t, &t, r(2, 1), r(1, 100)), Some(1));
    }

    #[test]
    fn bounds_and_defaults() {
        assert_eq!(skew_bound(1.0, 4, 0), 16.0);
        assert_eq!(skew_bound(1.0, 4, 1), 16.0 * 5.0 * 1.25);
        assert_eq!(default_s_max(17), 6);
        assert_eq!(floor_log2(17), 4);
        assert_eq!(default_checks(true), ["completion", "skew", "drift", "envelope", "period", "potentials", "chain"]);
    }

    proptest! {
        #[test]
        fn potential_invariants(
            ticks in proptest::collection::vec(0i64..60, 12),
            kappa in 1i64..8,
        ) {
            let g = LayeredGraph::new(BaseGraph::from_edges(&[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap(), 3).unwrap();
            let times: Vec<Vec<Option<R>>> = (0..3)
                .map(|l| (0..4).map(|v| Some(r(200 * l as i64, 100) + r(ticks[l * 4 + v], 1000))).collect())
                .collect();
            let t = trace(&g, &times, None);
            let p = params(r(kappa, 1000));
            let a = Analysis::new(&g, &p, &t);
            let table = a.potentials(3);
            prop_assert!(a.check_skew_vs_potential(&table).is_empty());
            let skew = a.local_skew();
            for s in 0..=3u32 {
                for l in 0..3u32 {
                    let psi = table.psi(s, l, 1).unwrap();
                    prop_assert!(psi >= R::from_integer(0));
                    let li = skew.intra[l as usize].as_ref().unwrap().value;
                    prop_assert!(li <= psi + p.kappa * R::from_integer(4 * i64::from(s)));
                    if s >= 1 {
                        prop_assert!(table.xi(s, l, 1).unwrap() <= table.psi(s - 1, l, 1).unwrap());
                    }
                }
            }
        }
    }
}
