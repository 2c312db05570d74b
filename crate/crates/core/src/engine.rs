//! Discrete-event simulator for the layered grid.
//!
//! Events are ordered by real time, then receiver `(layer, vertex)`, then
//! event kind, then sender, then insertion order, so runs are deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faults::{
    faulty_emissions, limit_changing, perturb_between_pulses, sample_placement, validate_placement, FaultBehavior, FaultError,
    FaultPlacement, PerturbationPlan, PerturbationSpec,
};
use crate::protocol::{ForwarderState, IterationSnapshot, Input, Machine, NodeState, SimplifiedState, TimerKind};
use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::timing::{
    assign_delays, sample_clocks, validate_params, ClockStrategy, DelayAssignment, DelayStrategy, HardwareClock, Params,
    TimingError,
};
use crate::topology::{BaseGraph, LayeredGraph, NodeId, Slot, TopologyError, VertexId};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("{0}")]
    Config(String),
    #[error(
        "iteration misalignment at {node} (t = {time}): received pulse {sender_pulse} from {sender} \
         after emitting {emitted} pulses"
    )]
    Misaligned { node: NodeId, sender: NodeId, sender_pulse: u64, emitted: u64, time: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologySpec {
    ReplicatedLine { m: usize },
    EdgeList { edges: Vec<(VertexId, VertexId)> },
}

impl TopologySpec {
    pub fn build(&self) -> Result<BaseGraph, TopologyError> {
        match self {
            Self::ReplicatedLine { m } => BaseGraph::replicated_line(*m),
            Self::EdgeList { edges } => BaseGraph::from_edges(edges),
        }
    }
}

/// How layer 0 produces pulses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SourceMode<T> {
    /// Pulse `k` of vertex `v` at `(k - 1) lambda + j_v`, `j_v` uniform in `[0, jitter]`.
    Ideal { jitter: T },
    /// A clock source pulses every `lambda`; layer 0 relays it along the line.
    Chain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineKind {
    #[default]
    Full,
    Simplified,
}

/// Arbitrary initial state: spurious in-flight messages and scrambled node state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub spurious_messages: usize,
    /// Fraction of nodes above layer 0 whose state is randomized.
    pub corrupt_fraction: f64,
}

/// Random fault placement: each node above layer 0 independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomFaults<T> {
    pub probability: f64,
    pub behaviors: Vec<FaultBehavior<T>>,
    /// Sampled faults allowed to change their offset between pulses.
    #[serde(default = "one")]
    pub max_changing: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig<T> {
    pub placement: FaultPlacement<T>,
    pub random: Option<RandomFaults<T>>,
    /// Reject placements with two faulty predecessors at one node.
    pub strict: bool,
}

impl<T> Default for FaultConfig<T> {
    fn default() -> Self {
        Self { placement: FaultPlacement::default(), random: None, strict: true }
    }
}

/// Declarative description of one simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig<T> {
    pub topology: TopologySpec,
    pub layers: u32,
    pub params: Params<T>,
    pub source: SourceMode<T>,
    pub delays: DelayStrategy<T>,
    pub clocks: ClockStrategy,
    pub faults: FaultConfig<T>,
    pub pulses: u64,
    pub machine: MachineKind,
    pub corruption: Option<CorruptionSpec>,
    pub perturbation: Option<PerturbationSpec<T>>,
    /// Master seed; every random component draws from its own stream of it.
    pub seed: u64,
    pub record_events: bool,
}

impl<T: Scalar> RunConfig<T> {
    /// Fault-free ideal-source run on a replicated line with uniform randomness.
    pub fn line(m: usize, layers: u32, params: Params<T>, pulses: u64, seed: u64) -> Self {
        Self {
            topology: TopologySpec::ReplicatedLine { m },
            layers,
            params,
            source: SourceMode::Ideal { jitter: params.kappa / T::lit(4.0) },
            delays: DelayStrategy::UniformRandom,
            clocks: ClockStrategy::Uniform,
            faults: FaultConfig::default(),
            pulses,
            machine: MachineKind::Full,
            corruption: None,
            perturbation: None,
            seed,
            record_events: false,
        }
    }

    pub fn graph(&self) -> Result<LayeredGraph, EngineError> {
        Ok(LayeredGraph::new(self.topology.build()?, self.layers)?)
    }

    /// Resolves strategies and seeds into concrete delays, clocks and faults.
    pub fn build(&self) -> Result<Scenario<T>, EngineError> {
        let graph = self.graph()?;
        let p = self.params;
        if self.pulses == 0 {
            return Err(EngineError::Config("pulse count must be positive".into()));
        }
        if let SourceMode::Ideal { jitter } = self.source {
            if jitter < T::zero() || jitter > p.kappa / T::lit(4.0) {
                return Err(EngineError::Config(format!(
                    "source jitter {jitter} must lie in [0, kappa/4 = {}]",
                    p.kappa / T::lit(4.0)
                )));
            }
        }
        if self.source == SourceMode::Chain && graph.base().chain().is_none() {
            return Err(EngineError::Config("chain source requires a replicated-line topology".into()));
        }
        let delays = assign_delays(&graph, &p, &self.delays, self.seed)?;
        let clocks = sample_clocks(&graph, &p, self.clocks, self.seed);
        let mut placement = self.faults.placement.clone();
        if let Some(r) = &self.faults.random {
            let mut sampled = sample_placement(&graph, r.probability, self.seed, &r.behaviors)?;
            limit_changing(&mut sampled, r.max_changing);
            for (node, b) in sampled.nodes {
                placement.nodes.entry(node).or_insert(b);
            }
        }
        if let Some(&node) = placement.nodes.keys().find(|n| !graph.contains(**n)) {
            return Err(FaultError::UnknownNode(node).into());
        }
        if self.faults.strict {
            if let Some(v) = validate_placement(&graph, &placement.set()).first() {
                return Err(FaultError::from(v).into());
            }
        }
        let perturbation = match &self.perturbation {
            Some(spec) => {
                let rates: Vec<T> = clocks.iter().map(HardwareClock::rate).collect();
                Some(perturb_between_pulses(&graph, &p, &delays, &rates, spec, self.pulses as usize + 1, self.seed)?)
            }
            None => None,
        };
        let mut jitter_rng = rng::stream(self.seed, streams::JITTER);
        let jitter = match self.source {
            SourceMode::Ideal { jitter } => {
                (0..graph.num_vertices()).map(|_| rng::uniform(&mut jitter_rng, T::zero(), jitter)).collect()
            }
            SourceMode::Chain => vec![T::zero(); graph.num_vertices()],
        };
        let check_alignment = placement.is_empty()
            && matches!(self.source, SourceMode::Ideal { .. })
            && self.corruption.is_none()
            && self.perturbation.is_none()
            && validate_params(&p, graph.base().diameter(), None).is_empty();
        Ok(Scenario {
            graph,
            params: p,
            source: self.source.clone(),
            delays,
            clocks,
            jitter,
            faults: placement,
            pulses: self.pulses,
            machine: self.machine,
            corruption: self.corruption.clone(),
            perturbation,
            seed: self.seed,
            check_alignment,
            record_events: self.record_events,
        })
    }

    pub fn run(&self) -> Result<PulseTrace<T>, EngineError> {
        simulate(&self.build()?)
    }
}

/// Fully resolved simulation input.
#[derive(Clone, Debug)]
pub struct Scenario<T> {
    pub graph: LayeredGraph,
    pub params: Params<T>,
    pub source: SourceMode<T>,
    pub delays: DelayAssignment<T>,
    pub clocks: Vec<HardwareClock<T>>,
    /// Ideal-source phase of each layer-0 vertex.
    pub jitter: Vec<T>,
    pub faults: FaultPlacement<T>,
    pub pulses: u64,
    pub machine: MachineKind,
    pub corruption: Option<CorruptionSpec>,
    pub perturbation: Option<PerturbationPlan<T>>,
    pub seed: u64,
    /// Abort if a correct node hears pulse `k` before emitting pulse `k - 1`.
    pub check_alignment: bool,
    pub record_events: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse<T> {
    pub real: T,
    pub local: T,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaultyEmission<T> {
    pub node: NodeId,
    pub pulse: u64,
    pub nominal: Option<T>,
    pub time: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKindTag {
    Deliver,
    Pulse,
    FaultyEmit,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord<T> {
    pub time: T,
    pub kind: EventKindTag,
    pub node: NodeId,
    pub peer: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The queue drained while some correct nodes had not emitted every pulse.
    Deadlock { stalled: usize, first: Vec<NodeId> },
    EventBudgetExhausted { processed: u64 },
}

/// Everything a run produced. Pulse and snapshot lists are indexed by
/// [`LayeredGraph::index`]; entry `k - 1` is pulse `k`. Faulty nodes have none.
#[derive(Clone, Debug)]
pub struct PulseTrace<T> {
    pub num_vertices: usize,
    pub num_layers: u32,
    pub pulses: Vec<Vec<Pulse<T>>>,
    pub snapshots: Vec<Vec<Option<IterationSnapshot<T>>>>,
    pub faulty: BTreeSet<NodeId>,
    pub emissions: Vec<FaultyEmission<T>>,
    pub events: Vec<EventRecord<T>>,
    pub status: RunStatus,
    pub events_processed: u64,
}

impl<T: Scalar> PulseTrace<T> {
    pub fn index(&self, node: NodeId) -> usize {
        node.layer as usize * self.num_vertices + node.vertex as usize
    }

    pub fn node_at(&self, index: usize) -> NodeId {
        NodeId::new((index / self.num_vertices) as u32, (index % self.num_vertices) as VertexId)
    }

    /// Real time of pulse `k` (1-based) at `node`.
    pub fn time(&self, node: NodeId, k: u64) -> Option<T> {
        let k = usize::try_from(k).ok()?.checked_sub(1)?;
        self.pulses.get(self.index(node))?.get(k).map(|p| p.real)
    }

    pub fn is_correct(&self, node: NodeId) -> bool {
        !self.faulty.contains(&node)
    }

    /// Largest pulse count of any correct node.
    pub fn max_pulses(&self) -> usize {
        self.pulses.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// The same trace with every time converted by `f`.
    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> PulseTrace<U> {
        let opt = |x: Option<T>| x.map(&f);
        PulseTrace {
            num_vertices: self.num_vertices,
            num_layers: self.num_layers,
            pulses: self
                .pulses
                .iter()
                .map(|ps| ps.iter().map(|p| Pulse { real: f(p.real), local: f(p.local) }).collect())
                .collect(),
            snapshots: self
                .snapshots
                .iter()
                .map(|ss| {
                    ss.iter()
                        .map(|s| {
                            s.as_ref().map(|s| IterationSnapshot {
                                h_own: opt(s.h_own),
                                h_min: opt(s.h_min),
                                h_max: opt(s.h_max),
                                correction: opt(s.correction),
                                arm: s.arm,
                                pulse_local: f(s.pulse_local),
                            })
                        })
                        .collect()
                })
                .collect(),
            faulty: self.faulty.clone(),
            emissions: self
                .emissions
                .iter()
                .map(|e| FaultyEmission { node: e.node, pulse: e.pulse, nominal: opt(e.nominal), time: f(e.time) })
                .collect(),
            events: self
                .events
                .iter()
                .map(|e| EventRecord { time: f(e.time), kind: e.kind, node: e.node, peer: e.peer })
                .collect(),
            status: self.status.clone(),
            events_processed: self.events_processed,
        }
    }

    /// Bitwise comparison of all pulse real times.
    pub fn same_pulse_times(&self, other: &Self) -> bool {
        self.pulses.len() == other.pulses.len()
            && self.pulses.iter().zip(&other.pulses).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.real.as_f64().to_bits() == y.real.as_f64().to_bits())
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Sender {
    Node(NodeId),
    Source,
}

#[derive(Clone, Debug)]
enum EventKind<T> {
    Deliver { to: usize, slot: Slot, from: Sender, sender_pulse: u64 },
    Timer { node: usize, kind: TimerKind, local: T, epoch: u32 },
    IdealPulse { node: usize },
    SourcePulse { k: u64 },
}

#[derive(Clone, Debug)]
struct Event<T> {
    time: T,
    receiver: (u32, u32),
    rank: u8,
    sender: (u32, u32),
    seq: u64,
    kind: EventKind<T>,
}

impl<T: Scalar> Event<T> {
    fn order(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp_lossy(&other.time)
            .then(self.receiver.cmp(&other.receiver))
            .then(self.rank.cmp(&other.rank))
            .then(self.sender.cmp(&other.sender))
            .then(self.seq.cmp(&other.seq))
    }
}

impl<T: Scalar> PartialEq for Event<T> {
    fn eq(&self, other: &Self) -> bool {
        self.order(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for Event<T> {}

impl<T: Scalar> PartialOrd for Event<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for Event<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.order(self)
    }
}

struct NodeRt<T> {
    machine: Option<Machine<T>>,
    clock: HardwareClock<T>,
    epoch: u32,
    fault: Option<FaultBehavior<T>>,
    emitted: u64,
}

struct Sim<'a, T: Scalar> {
    sc: &'a Scenario<T>,
    nodes: Vec<NodeRt<T>>,
    queue: BinaryHeap<Event<T>>,
    seq: u64,
    trace: PulseTrace<T>,
}

const RANK_DELIVER: u8 = 0;
const RANK_PULSE: u8 = 1;
const RANK_TIMER: u8 = 2;

impl<'a, T: Scalar> Sim<'a, T> {
    fn new(sc: &'a Scenario<T>) -> Self {
        let g = &sc.graph;
        let chain = matches!(sc.source, SourceMode::Chain);
        let nodes = g
            .nodes()
            .map(|node| {
                let degree = g.base().degree(node.vertex);
                let fault = sc.faults.get(node).cloned();
                let machine = if node.layer == 0 {
                    chain.then(|| Machine::Forwarder(ForwarderState::default()))
                } else {
                    Some(match sc.machine {
                        MachineKind::Full => Machine::Gcs(NodeState::new(degree)),
                        MachineKind::Simplified => Machine::Simplified(SimplifiedState::new(degree)),
                    })
                };
                let machine = match &fault {
                    Some(f) if !f.behavior.needs_nominal() => None,
                    _ => machine,
                };
                NodeRt { machine, clock: sc.clocks[g.index(node)], epoch: 0, fault, emitted: 0 }
            })
            .collect();
        let n = g.num_nodes();
        let trace = PulseTrace {
            num_vertices: g.num_vertices(),
            num_layers: g.num_layers(),
            pulses: vec![Vec::new(); n],
            snapshots: vec![Vec::new(); n],
            faulty: sc.faults.set(),
            emissions: Vec::new(),
            events: Vec::new(),
            status: RunStatus::Completed,
            events_processed: 0,
        };
        Self { sc, nodes, queue: BinaryHeap::new(), seq: 0, trace }
    }

    fn push(&mut self, time: T, receiver: NodeId, rank: u8, sender: (u32, u32), kind: EventKind<T>) {
        self.seq += 1;
        self.queue.push(Event { time, receiver: (receiver.layer, receiver.vertex), rank, sender, seq: self.seq, kind });
    }

    fn delays_for(&self, pulse: u64) -> &DelayAssignment<T> {
        match &self.sc.perturbation {
            Some(plan) => plan.delays_for(pulse),
            None => &self.sc.delays,
        }
    }

    /// Grid and chain recipients of a pulse from `from`.
    fn recipients(&self, from: Sender) -> Vec<(NodeId, Slot, bool)> {
        let g = &self.sc.graph;
        let mut out = Vec::new();
        let chain = match (&self.sc.source, g.base().chain()) {
            (SourceMode::Chain, Some(c)) => Some(c),
            _ => None,
        };
        match from {
            Sender::Source => {
                if let Some(c) = chain {
                    out.push((NodeId::new(0, c.order[0]), 0, true));
                    out.extend(c.start_replicas.iter().map(|&v| (NodeId::new(0, v), 0, true)));
                }
            }
            Sender::Node(node) => {
                out.extend(g.successors(node).into_iter().map(|(n, s)| (n, s, false)));
                if let (0, Some(c)) = (node.layer, chain) {
                    if let Some(i) = c.order.iter().position(|&v| v == node.vertex) {
                        if let Some(&next) = c.order.get(i + 1) {
                            out.push((NodeId::new(0, next), 0, true));
                            if i + 2 == c.order.len() {
                                out.extend(c.end_replicas.iter().map(|&v| (NodeId::new(0, v), 0, true)));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn send(&mut self, from: Sender, at: T, pulse: u64, only: Option<&[VertexId]>) {
        let sender_key = match from {
            Sender::Node(n) => (n.layer, n.vertex),
            Sender::Source => (u32::MAX, u32::MAX),
        };
        for (to, slot, is_chain) in self.recipients(from) {
            if only.is_some_and(|t| !t.contains(&to.vertex)) {
                continue;
            }
            let delays = self.delays_for(pulse);
            let idx = self.sc.graph.index(to);
            let delay = if is_chain { delays.chain(to.vertex) } else { delays.get(idx, slot) };
            let kind = EventKind::Deliver { to: idx, slot, from, sender_pulse: pulse };
            self.push(at + delay, to, RANK_DELIVER, sender_key, kind);
        }
    }

    fn arm(&mut self, idx: usize, kind: TimerKind, local: T, now: T) {
        let rt = &self.nodes[idx];
        let at = rt.clock.real(local).max_of(now);
        let node = self.sc.graph.node_at(idx);
        let epoch = rt.epoch;
        self.push(at, node, RANK_TIMER, (node.layer, node.vertex), EventKind::Timer { node: idx, kind, local, epoch });
    }

    fn log(&mut self, time: T, kind: EventKindTag, node: NodeId, peer: Option<NodeId>) {
        if self.sc.record_events {
            self.trace.events.push(EventRecord { time, kind, node, peer });
        }
    }

    fn emit_faulty(&mut self, idx: usize, nominal: Option<T>, k: u64, now: T) {
        let node = self.sc.graph.node_at(idx);
        let Some(fault) = self.nodes[idx].fault.clone() else { return };
        for t in faulty_emissions(&fault.behavior, nominal, k) {
            let t = t.max_of(now);
            self.trace.emissions.push(FaultyEmission { node, pulse: k, nominal, time: t });
            self.log(t, EventKindTag::FaultyEmit, node, None);
            self.send(Sender::Node(node), t, k, fault.targets.as_deref());
        }
    }

    fn correct_pulse(&mut self, idx: usize, now: T, local: T, snapshot: Option<IterationSnapshot<T>>) {
        let node = self.sc.graph.node_at(idx);
        self.trace.pulses[idx].push(Pulse { real: now, local });
        self.trace.snapshots[idx].push(snapshot);
        self.log(now, EventKindTag::Pulse, node, None);
        let k = self.trace.pulses[idx].len() as u64;
        self.send(Sender::Node(node), now, k, None);
    }

    fn after_pulse(&mut self, idx: usize, now: T) {
        self.nodes[idx].emitted += 1;
        let k = self.nodes[idx].emitted;
        if let Some(plan) = &self.sc.perturbation {
            let rate = plan.rate_for(k + 1, idx);
            let rt = &mut self.nodes[idx];
            if rate != rt.clock.rate() {
                rt.clock.rebase(now, rate);
                rt.epoch += 1;
                let timers = rt.machine.as_ref().map(Machine::armed_timers).unwrap_or_default();
                for (kind, local) in timers {
                    self.arm(idx, kind, local, now);
                }
            }
        }
    }

    fn run_machine(&mut self, idx: usize, input: Input<T>, now: T) {
        let p = self.sc.params;
        let Some(machine) = self.nodes[idx].machine.as_mut() else { return };
        let out = machine.step(input, &p);
        let faulty = self.nodes[idx].fault.is_some();
        for (kind, local) in out.timers {
            self.arm(idx, kind, local, now);
            if faulty && kind == TimerKind::Pulse {
                let nominal = self.nodes[idx].clock.real(local).max_of(now);
                let k = self.nodes[idx].emitted + 1;
                self.emit_faulty(idx, Some(nominal), k, now);
            }
        }
        if let Some(e) = out.pulse {
            if !faulty {
                self.correct_pulse(idx, now, e.local, e.snapshot);
            }
            self.after_pulse(idx, now);
        }
    }

    fn init(&mut self) {
        let sc = self.sc;
        let g = &sc.graph;
        let lambda = sc.params.lambda;
        match sc.source {
            SourceMode::Ideal { .. } => {
                for v in 0..g.num_vertices() {
                    let node = NodeId::new(0, v as VertexId);
                    let idx = g.index(node);
                    for k in 1..=sc.pulses {
                        let t = T::from_count(k - 1) * lambda + sc.jitter[v];
                        if self.nodes[idx].fault.is_some() {
                            self.emit_faulty(idx, Some(t), k, T::zero());
                        } else {
                            self.push(t, node, RANK_PULSE, (0, node.vertex), EventKind::IdealPulse { node: idx });
                        }
                    }
                }
            }
            SourceMode::Chain => {
                let extra = g.base().chain().map_or(0, |c| c.order.len() as u64);
                for k in 1..=sc.pulses + extra {
                    let t = T::from_count(k - 1) * lambda;
                    self.push(t, NodeId::new(0, 0), RANK_PULSE, (u32::MAX, u32::MAX), EventKind::SourcePulse { k });
                }
            }
        }
        for idx in 0..self.nodes.len() {
            if let Some(f) = &self.nodes[idx].fault {
                if let crate::faults::FaultKind::Scripted { times } = &f.behavior {
                    for k in 1..=times.len() as u64 {
                        self.emit_faulty(idx, None, k, T::zero());
                    }
                }
            }
        }
        if let Some(spec) = sc.corruption.clone() {
            self.corrupt(&spec);
        }
    }

    fn corrupt(&mut self, spec: &CorruptionSpec) {
        let sc = self.sc;
        let g = &sc.graph;
        let p = sc.params;
        let mut rng = rng::stream(sc.seed, streams::CORRUPT);
        for idx in 0..self.nodes.len() {
            if !rng.random_bool(spec.corrupt_fraction.clamp(0.0, 1.0)) {
                continue;
            }
            let rt = &mut self.nodes[idx];
            let now_local = rt.clock.local(T::zero());
            if let Some(m) = rt.machine.as_mut() {
                m.corrupt(&mut rng, now_local, &p);
                for (kind, local) in m.armed_timers() {
                    self.arm(idx, kind, local, T::zero());
                }
            }
        }
        let upper: Vec<usize> = (0..self.nodes.len()).filter(|&i| g.node_at(i).layer > 0).collect();
        if upper.is_empty() {
            return;
        }
        for _ in 0..spec.spurious_messages {
            let idx = upper[rng.random_range(0..upper.len())];
            let to = g.node_at(idx);
            let slot = rng.random_range(0..=g.base().degree(to.vertex));
            let from = NodeId::new(to.layer - 1, g.slot_vertex(to.vertex, slot));
            let at = rng::uniform(&mut rng, T::zero(), p.d);
            let kind = EventKind::Deliver { to: idx, slot, from: Sender::Node(from), sender_pulse: 0 };
            self.push(at, to, RANK_DELIVER, (from.layer, from.vertex), kind);
        }
    }

    fn check_alignment(&self, idx: usize, from: Sender, sender_pulse: u64, now: T) -> Result<(), EngineError> {
        let Sender::Node(sender) = from else { return Ok(()) };
        let rt = &self.nodes[idx];
        if rt.emitted + 1 != sender_pulse {
            return Err(EngineError::Misaligned {
                node: self.sc.graph.node_at(idx),
                sender,
                sender_pulse,
                emitted: rt.emitted,
                time: now.as_f64(),
            });
        }
        Ok(())
    }

    fn run(mut self) -> Result<PulseTrace<T>, EngineError> {
        self.init();
        let g = &self.sc.graph;
        let budget = 64 * (g.num_nodes() as u64 + 1) * (self.sc.pulses + g.num_layers() as u64 + 8) * 8;
        let mut processed = 0u64;
        while let Some(ev) = self.queue.pop() {
            processed += 1;
            if processed > budget {
                self.trace.status = RunStatus::EventBudgetExhausted { processed };
                break;
            }
            let now = ev.time;
            match ev.kind {
                EventKind::Deliver { to, slot, from, sender_pulse } => {
                    if let Sender::Node(n) = from {
                        self.log(now, EventKindTag::Deliver, g.node_at(to), Some(n));
                    }
                    if self.sc.check_alignment && self.nodes[to].fault.is_none() {
                        self.check_alignment(to, from, sender_pulse, now)?;
                    }
                    let local = self.nodes[to].clock.local(now);
                    self.run_machine(to, Input::Message { slot, local }, now);
                }
                EventKind::Timer { node, kind, local, epoch } => {
                    if epoch == self.nodes[node].epoch {
                        self.run_machine(node, Input::Timer { kind, local }, now);
                    }
                }
                EventKind::IdealPulse { node } => {
                    let local = self.nodes[node].clock.local(now);
                    self.correct_pulse(node, now, local, None);
                    self.after_pulse(node, now);
                }
                EventKind::SourcePulse { k } => {
                    self.send(Sender::Source, now, k, None);
                }
            }
        }
        self.trace.events_processed = processed;
        if self.trace.status == RunStatus::Completed {
            let stalled: Vec<NodeId> = (0..self.nodes.len())
                .filter(|&i| self.nodes[i].fault.is_none() && (self.trace.pulses[i].len() as u64) < self.sc.pulses)
                .map(|i| g.node_at(i))
                .collect();
            if !stalled.is_empty() {
                self.trace.status =
                    RunStatus::Deadlock { stalled: stalled.len(), first: stalled.into_iter().take(8).collect() };
            }
        }
        Ok(self.trace)
    }
}

/// Runs a scenario to quiescence.
pub fn simulate<T: Scalar>(scenario: &Scenario<T>) -> Result<PulseTrace<T>, EngineError> {
    Sim::new(scenario).run()
}

/// Runs `config` and the same configuration with `node` made correct.
pub fn run_paired<T: Scalar>(config: &RunConfig<T>, node: NodeId) -> Result<(PulseTrace<T>, PulseTrace<T>), EngineError> {
    let faulty = config.build()?;
    let mut healed = faulty.clone();
    healed.faults = faulty.faults.without(node);
    Ok((simulate(&faulty)?, simulate(&healed)?))
}
