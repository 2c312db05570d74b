//! Timing parameters, hardware clocks and link delays.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::scalar::Scalar;
use crate::topology::{LayeredGraph, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("{name} must be positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("delay uncertainty u = {u} exceeds the maximum delay d = {d}")]
    UncertaintyExceedsDelay { u: f64, d: f64 },
    #[error("clock drift bound theta = {0} is below 1")]
    RateBelowOne(f64),
    #[error("pulse period lambda = {lambda} is below the maximum delay d = {d}")]
    PeriodBelowDelay { lambda: f64, d: f64 },
    #[error("derived kappa = {0} is not positive")]
    KappaNotPositive(f64),
    #[error("delay {delay} on link {from} -> {to} is outside [{lo}, {hi}]")]
    DelayOutOfRange { from: NodeId, to: NodeId, delay: f64, lo: f64, hi: f64 },
    #[error("link {from} -> {to} does not exist")]
    NoSuchLink { from: NodeId, to: NodeId },
}

/// `kappa = 2 (u + (1 - 1/theta)(lambda - d))`, the per-hop estimate uncertainty.
pub fn derive_kappa<T: Scalar>(u: T, theta: T, lambda: T, d: T) -> Result<T, TimingError> {
    let two = T::lit(2.0);
    let kappa = two * (u + (T::one() - T::one() / theta) * (lambda - d));
    if kappa > T::zero() {
        Ok(kappa)
    } else {
        Err(TimingError::KappaNotPositive(kappa.as_f64()))
    }
}

/// Model parameters. `kappa` is derived; `c` is the slack constant used by validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub d: T,
    pub u: T,
    pub theta: T,
    pub lambda: T,
    pub kappa: T,
    pub c: T,
}

impl<T: Scalar> Params<T> {
    pub fn new(d: T, u: T, theta: T, lambda: T, c: T) -> Result<Self, TimingError> {
        if !(d > T::zero()) {
            return Err(TimingError::NotPositive { name: "d", value: d.as_f64() });
        }
        if u < T::zero() {
            return Err(TimingError::NotPositive { name: "u", value: u.as_f64() });
        }
        if u > d {
            return Err(TimingError::UncertaintyExceedsDelay { u: u.as_f64(), d: d.as_f64() });
        }
        if theta < T::one() {
            return Err(TimingError::RateBelowOne(theta.as_f64()));
        }
        if lambda < d {
            return Err(TimingError::PeriodBelowDelay { lambda: lambda.as_f64(), d: d.as_f64() });
        }
        if !(c > T::zero()) {
            return Err(TimingError::NotPositive { name: "c", value: c.as_f64() });
        }
        let kappa = derive_kappa(u, theta, lambda, d)?;
        Ok(Self { d, u, theta, lambda, kappa, c })
    }

    pub fn min_delay(&self) -> T {
        self.d - self.u
    }

    /// `lambda - d`, the nominal local wait between hearing a pulse and emitting one.
    pub fn forward_wait(&self) -> T {
        self.lambda - self.d
    }

    /// Quiet interval that separates listening phases in the stabilizing variant.
    pub fn quiet_period(&self) -> T {
        self.lambda / T::lit(10.0)
    }

    /// Default skew budget `4 kappa (2 + log2 D)`.
    pub fn skew_budget(&self, diameter: u32) -> T {
        T::lit(4.0) * self.kappa * T::lit(2.0 + log2_diameter(diameter))
    }

    /// Worst-case error of a locally measured interval between two messages
    /// whose send times differ by at most `budget`.
    pub fn measurement_error_bound(&self, budget: T) -> T {
        (self.theta - T::one()) * (budget + self.u) + self.u
    }
}

pub fn log2_diameter(diameter: u32) -> f64 {
    f64::from(diameter.max(1)).log2()
}

/// A violated regime constraint, with the required bound and the actual value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ParamViolation {
    /// `lambda >= c theta (budget + u) + d`
    PeriodTooShort { required: f64, actual: f64 },
    /// `d >= c (theta (budget + u) + kappa)`
    DelayTooShort { required: f64, actual: f64 },
}

impl fmt::Display for ParamViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PeriodTooShort { required, actual } => write!(
                f,
                "period constraint lambda >= c*theta*(budget+u)+d violated: need {required}, have {actual}"
            ),
            Self::DelayTooShort { required, actual } => write!(
                f,
                "delay constraint d >= c*(theta*(budget+u)+kappa) violated: need {required}, have {actual}"
            ),
        }
    }
}

/// Checks the period and delay constraints against `budget`
/// (default: [`Params::skew_budget`]). An empty result means the regime holds.
pub fn validate_params<T: Scalar>(p: &Params<T>, diameter: u32, budget: Option<T>) -> Vec<ParamViolation> {
    let budget = budget.unwrap_or_else(|| p.skew_budget(diameter));
    let mut out = Vec::new();
    let period = p.c * p.theta * (budget + p.u) + p.d;
    if p.lambda < period {
        out.push(ParamViolation::PeriodTooShort { required: period.as_f64(), actual: p.lambda.as_f64() });
    }
    let delay = p.c * (p.theta * (budget + p.u) + p.kappa);
    if p.d < delay {
        out.push(ParamViolation::DelayTooShort { required: delay.as_f64(), actual: p.d.as_f64() });
    }
    out
}

/// Affine hardware clock `H(t) = anchor_local + rate (t - anchor_real)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardwareClock<T> {
    anchor_real: T,
    anchor_local: T,
    rate: T,
}

impl<T: Scalar> HardwareClock<T> {
    /// Clock reading `offset` at real time 0 and advancing at `rate`.
    pub fn new(rate: T, offset: T) -> Self {
        Self { anchor_real: T::zero(), anchor_local: offset, rate }
    }

    pub fn rate(&self) -> T {
        self.rate
    }

    pub fn offset(&self) -> T {
        self.local(T::zero())
    }

    pub fn local(&self, real: T) -> T {
        self.anchor_local + self.rate * (real - self.anchor_real)
    }

    pub fn real(&self, local: T) -> T {
        self.anchor_real + (local - self.anchor_local) / self.rate
    }

    /// Continues the clock from real time `at` with a new rate.
    pub fn rebase(&mut self, at: T, rate: T) {
        self.anchor_local = self.local(at);
        self.anchor_real = at;
        self.rate = rate;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockStrategy {
    /// Rates uniform in `[1, theta]`, offsets uniform in `[0, lambda)`.
    #[default]
    Uniform,
    /// Rate 1, offset 0.
    Identity,
    /// Rate 1, random offsets.
    Slow,
    /// Rate theta, random offsets.
    Fast,
    /// Rate 1 on even vertices and theta on odd ones, offset 0.
    Alternating,
}

/// One clock per grid node, indexed like [`LayeredGraph::index`].
pub fn sample_clocks<T: Scalar>(
    graph: &LayeredGraph,
    p: &Params<T>,
    strategy: ClockStrategy,
    seed: u64,
) -> Vec<HardwareClock<T>> {
    let mut rng = rng::stream(seed, streams::CLOCKS);
    graph
        .nodes()
        .map(|node| {
            let rate = rng::uniform(&mut rng, T::one(), p.theta);
            let offset = rng::uniform(&mut rng, T::zero(), p.lambda);
            match strategy {
                ClockStrategy::Uniform => HardwareClock::new(rate, offset),
                ClockStrategy::Identity => HardwareClock::new(T::one(), T::zero()),
                ClockStrategy::Slow => HardwareClock::new(T::one(), offset),
                ClockStrategy::Fast => HardwareClock::new(p.theta, offset),
                ClockStrategy::Alternating => {
                    let r = if node.vertex % 2 == 0 { T::one() } else { p.theta };
                    HardwareClock::new(r, T::zero())
                }
            }
        })
        .collect()
}

/// Explicit delay for one grid link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayOverride<T> {
    pub from: NodeId,
    pub to: NodeId,
    pub delay: T,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "links")]
pub enum DelayStrategy<T> {
    /// Independent uniform draws in `[d - u, d]`.
    #[default]
    UniformRandom,
    AllMin,
    AllMax,
    /// Minimum delay into even layers, maximum into odd layers.
    PerLayerAlternating,
    /// Maximum delay except for the listed links.
    CustomMap(Vec<DelayOverride<T>>),
}

/// Static link delays. Grid delays are indexed by receiver and slot; chain
/// delays by the receiving layer-0 vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayAssignment<T> {
    incoming: Vec<Vec<T>>,
    chain: Vec<T>,
}

impl<T: Scalar> DelayAssignment<T> {
    pub fn get(&self, receiver_index: usize, slot: usize) -> T {
        self.incoming[receiver_index][slot]
    }

    pub fn set(&mut self, receiver_index: usize, slot: usize, delay: T) {
        self.incoming[receiver_index][slot] = delay;
    }

    pub fn chain(&self, vertex: u32) -> T {
        self.chain[vertex as usize]
    }

    pub fn incoming(&self, receiver_index: usize) -> &[T] {
        &self.incoming[receiver_index]
    }

    pub fn num_receivers(&self) -> usize {
        self.incoming.len()
    }

    /// Iterates over every stored delay (grid links, then chain hops).
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.incoming.iter().flatten().copied().chain(self.chain.iter().copied())
    }
}

pub fn assign_delays<T: Scalar>(
    graph: &LayeredGraph,
    p: &Params<T>,
    strategy: &DelayStrategy<T>,
    seed: u64,
) -> Result<DelayAssignment<T>, TimingError> {
    let mut rng = rng::stream(seed, streams::DELAYS);
    let (lo, hi) = (p.min_delay(), p.d);
    let mut pick = |layer: u32| match strategy {
        DelayStrategy::UniformRandom => rng::uniform(&mut rng, lo, hi),
        DelayStrategy::AllMin => lo,
        DelayStrategy::AllMax | DelayStrategy::CustomMap(_) => hi,
        DelayStrategy::PerLayerAlternating => {
            if layer.is_multiple_of(2) {
                lo
            } else {
                hi
            }
        }
    };
    let mut incoming = Vec::with_capacity(graph.num_nodes());
    for node in graph.nodes() {
        let n = if node.layer == 0 { 0 } else { graph.base().degree(node.vertex) + 1 };
        incoming.push((0..n).map(|_| pick(node.layer)).collect::<Vec<_>>());
    }
    let chain = (0..graph.num_vertices()).map(|_| pick(0)).collect();
    let mut out = DelayAssignment { incoming, chain };
    if let DelayStrategy::CustomMap(links) = strategy {
        for o in links {
            let linked = graph.contains(o.from)
                && graph.contains(o.to)
                && o.to.layer == o.from.layer + 1
                && (o.to.vertex == o.from.vertex || graph.base().neighbors(o.to.vertex).contains(&o.from.vertex));
            if !linked {
                return Err(TimingError::NoSuchLink { from: o.from, to: o.to });
            }
            if o.delay < lo || o.delay > hi {
                return Err(TimingError::DelayOutOfRange {
                    from: o.from,
                    to: o.to,
                    delay: o.delay.as_f64(),
                    lo: lo.as_f64(),
                    hi: hi.as_f64(),
                });
            }
            let slot = graph.slot_of(o.to.vertex, o.from.vertex);
            out.set(graph.index(o.to), slot, o.delay);
        }
    }
    Ok(out)
}
