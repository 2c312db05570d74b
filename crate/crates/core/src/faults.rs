//! Byzantine node behaviors, fault placement, and between-pulse perturbations.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::timing::{log2_diameter, DelayAssignment, Params};
use crate::topology::{LayeredGraph, NodeId, VertexId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("node {node} has {count} faulty predecessors ({list}); at most one is allowed")]
    TooManyFaultyPredecessors { node: NodeId, count: usize, list: String },
    #[error("faulty node {0} is not in the grid")]
    UnknownNode(NodeId),
    #[error("{what} perturbation step {step} exceeds the cap {cap}")]
    PerturbationTooLarge { what: &'static str, step: f64, cap: f64 },
    #[error("fault probability {0} is outside [0, 1]")]
    BadProbability(f64),
}

/// How a faulty node emits pulses. Offsets are relative to the pulse time the
/// node would have produced had it been correct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind<T> {
    Silent,
    FixedOffset { offset: T },
    /// Absolute real emission times, one per pulse; silent once exhausted.
    Scripted { times: Vec<T> },
    /// `count` emissions `spacing` apart, starting at the nominal time.
    Burst { count: u32, spacing: T },
    /// Offset for pulse `k` is `offsets[(k - 1) % len]`.
    PerPulseOffset { offsets: Vec<T> },
}

impl<T> FaultKind<T> {
    /// Whether emissions depend on the nominal (correct) pulse time.
    pub fn needs_nominal(&self) -> bool {
        matches!(self, Self::FixedOffset { .. } | Self::Burst { .. } | Self::PerPulseOffset { .. })
    }

    /// Whether the offset varies from pulse to pulse.
    pub fn is_changing(&self) -> bool
    where
        T: PartialEq,
    {
        matches!(self, Self::PerPulseOffset { offsets } if offsets.windows(2).any(|w| w[0] != w[1]))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Silent => "silent",
            Self::FixedOffset { .. } => "fixed_offset",
            Self::Scripted { .. } => "scripted",
            Self::Burst { .. } => "burst",
            Self::PerPulseOffset { .. } => "per_pulse_offset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultBehavior<T> {
    pub behavior: FaultKind<T>,
    /// Recipient vertices on the next layer; all successors when absent.
    #[serde(default)]
    pub targets: Option<Vec<VertexId>>,
}

impl<T> FaultBehavior<T> {
    pub fn broadcast(behavior: FaultKind<T>) -> Self {
        Self { behavior, targets: None }
    }

    pub fn reaches(&self, vertex: VertexId) -> bool {
        self.targets.as_ref().is_none_or(|t| t.contains(&vertex))
    }
}

/// Real emission times of pulse `k` (1-based) given its nominal time.
pub fn faulty_emissions<T: Scalar>(kind: &FaultKind<T>, nominal: Option<T>, k: u64) -> Vec<T> {
    let idx = k.saturating_sub(1) as usize;
    match (kind, nominal) {
        (FaultKind::Silent, _) => Vec::new(),
        (FaultKind::Scripted { times }, _) => times.get(idx).copied().into_iter().collect(),
        (FaultKind::FixedOffset { offset }, Some(t)) => vec![t + *offset],
        (FaultKind::Burst { count, spacing }, Some(t)) => {
            (0..*count).map(|i| t + T::from_count(u64::from(i)) * *spacing).collect()
        }
        (FaultKind::PerPulseOffset { offsets }, Some(t)) if !offsets.is_empty() => {
            vec![t + offsets[idx % offsets.len()]]
        }
        _ => Vec::new(),
    }
}

/// Faulty nodes and their behaviors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPlacement<T> {
    pub nodes: BTreeMap<NodeId, FaultBehavior<T>>,
}

impl<T> Default for FaultPlacement<T> {
    fn default() -> Self {
        Self { nodes: BTreeMap::new() }
    }
}

impl<T: Clone> FaultPlacement<T> {
    pub fn set(&self) -> BTreeSet<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, node: NodeId) -> Option<&FaultBehavior<T>> {
        self.nodes.get(&node)
    }

    pub fn without(&self, node: NodeId) -> Self {
        let mut nodes = self.nodes.clone();
        nodes.remove(&node);
        Self { nodes }
    }
}

/// A node with more than one faulty predecessor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConstraintViolation {
    pub node: NodeId,
    pub faulty_predecessors: Vec<NodeId>,
}

impl From<&ConstraintViolation> for FaultError {
    fn from(v: &ConstraintViolation) -> Self {
        let list = v.faulty_predecessors.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
        FaultError::TooManyFaultyPredecessors { node: v.node, count: v.faulty_predecessors.len(), list }
    }
}

/// Nodes that see two or more faulty predecessors.
pub fn validate_placement(graph: &LayeredGraph, faulty: &BTreeSet<NodeId>) -> Vec<ConstraintViolation> {
    graph
        .nodes()
        .filter(|n| n.layer > 0)
        .filter_map(|node| {
            let bad: Vec<NodeId> = graph.predecessors(node).into_iter().filter(|p| faulty.contains(p)).collect();
            (bad.len() > 1).then_some(ConstraintViolation { node, faulty_predecessors: bad })
        })
        .collect()
}

/// Marks each node above layer 0 faulty with probability `probability`,
/// choosing its behavior uniformly from `behaviors` (silent if empty).
pub fn sample_placement<T: Scalar>(
    graph: &LayeredGraph,
    probability: f64,
    seed: u64,
    behaviors: &[FaultBehavior<T>],
) -> Result<FaultPlacement<T>, FaultError> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(FaultError::BadProbability(probability));
    }
    let mut rng = rng::stream(seed, streams::FAULTS);
    let mut nodes = BTreeMap::new();
    for node in graph.nodes().filter(|n| n.layer > 0) {
        if rng.random_bool(probability) {
            let b = if behaviors.is_empty() {
                FaultBehavior::broadcast(FaultKind::Silent)
            } else {
                behaviors[rng.random_range(0..behaviors.len())].clone()
            };
            nodes.insert(node, b);
        }
    }
    Ok(FaultPlacement { nodes })
}

/// Freezes all but the first `max_changing` changing faults to their first offset.
pub fn limit_changing<T: Scalar>(placement: &mut FaultPlacement<T>, max_changing: usize) {
    let mut seen = 0;
    for b in placement.nodes.values_mut() {
        if b.behavior.is_changing() {
            seen += 1;
            if seen > max_changing {
                if let FaultKind::PerPulseOffset { offsets } = &b.behavior {
                    b.behavior = FaultKind::FixedOffset { offset: offsets[0] };
                }
            }
        }
    }
}

/// Maximum per-pulse change of a delay and of a clock rate, for a grid of
/// `nodes` nodes and base diameter `diameter`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PerturbationCaps<T> {
    pub delay: T,
    pub rate: T,
}

pub fn perturbation_caps<T: Scalar>(p: &Params<T>, nodes: usize, diameter: u32) -> PerturbationCaps<T> {
    let scale = T::lit(log2_diameter(diameter) / (nodes as f64).sqrt());
    PerturbationCaps { delay: p.u * scale, rate: (p.theta - T::one()) * scale }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec<T> {
    pub delay_step: T,
    pub rate_step: T,
}

/// Delays and clock rates for each pulse index, as random walks clamped to
/// the model ranges. Entry `k - 1` applies to pulse `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationPlan<T> {
    pub delays: Vec<DelayAssignment<T>>,
    pub rates: Vec<Vec<T>>,
}

impl<T: Scalar> PerturbationPlan<T> {
    pub fn delays_for(&self, pulse: u64) -> &DelayAssignment<T> {
        let i = (pulse.max(1) as usize - 1).min(self.delays.len() - 1);
        &self.delays[i]
    }

    pub fn rate_for(&self, pulse: u64, node_index: usize) -> T {
        let i = (pulse.max(1) as usize - 1).min(self.rates.len() - 1);
        self.rates[i][node_index]
    }
}

pub fn perturb_between_pulses<T: Scalar>(
    graph: &LayeredGraph,
    p: &Params<T>,
    delays: &DelayAssignment<T>,
    rates: &[T],
    spec: &PerturbationSpec<T>,
    pulses: usize,
    seed: u64,
) -> Result<PerturbationPlan<T>, FaultError> {
    let caps = perturbation_caps(p, graph.num_nodes(), graph.base().diameter());
    if spec.delay_step > caps.delay {
        return Err(FaultError::PerturbationTooLarge {
            what: "delay",
            step: spec.delay_step.as_f64(),
            cap: caps.delay.as_f64(),
        });
    }
    if spec.rate_step > caps.rate {
        return Err(FaultError::PerturbationTooLarge {
            what: "rate",
            step: spec.rate_step.as_f64(),
            cap: caps.rate.as_f64(),
        });
    }
    let mut rng = rng::stream(seed, streams::PERTURB);
    let clamp = |x: T, lo: T, hi: T| x.max_of(lo).min_of(hi);
    let mut plan = PerturbationPlan { delays: vec![delays.clone()], rates: vec![rates.to_vec()] };
    for _ in 1..pulses.max(1) {
        let mut next = plan.delays.last().expect("seeded").clone();
        for r in 0..next.num_receivers() {
            for slot in 0..next.incoming(r).len() {
                let step = rng::uniform(&mut rng, -spec.delay_step, spec.delay_step);
                let x = clamp(next.get(r, slot) + step, p.min_delay(), p.d);
                next.set(r, slot, x);
            }
        }
        let rates: Vec<T> = plan
            .rates
            .last()
            .expect("seeded")
            .iter()
            .map(|&x| clamp(x + rng::uniform(&mut rng, -spec.rate_step, spec.rate_step), T::one(), p.theta))
            .collect();
        plan.delays.push(next);
        plan.rates.push(rates);
    }
    Ok(plan)
}
