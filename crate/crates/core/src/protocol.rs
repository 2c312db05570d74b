//! Per-node pulse state machines.
//!
//! [`NodeState`] is the deployed listening algorithm: it collects the
//! arrival times of one pulse from its own copy and its neighbors on the
//! layer below, leaves the listening loop on a local-time threshold, and
//! schedules its pulse after a bounded correction. [`SimplifiedState`] waits
//! for every predecessor and is only meaningful without faults; it serves as
//! a reference. [`ForwarderState`] relays pulses along the layer-0 chain.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::scalar::Scalar;
use crate::timing::Params;
use crate::topology::Slot;

/// Which expression of the correction formula produced the value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Raw estimate below zero (or the latest neighbor is missing).
    Lower,
    /// Raw estimate above `theta * kappa`.
    Upper,
    /// Raw estimate used as is.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correction<T> {
    pub value: T,
    /// Raw estimate before clamping; `None` when the latest neighbor is missing.
    pub estimate: Option<T>,
    pub branch: Branch,
}

/// Raw estimate `min_s max(own - max + 4 s kappa, own - min - 4 s kappa) - kappa / 2`.
///
/// The minimizing `s` is near `(max - min) / (8 kappa)`; the neighbors of its
/// floor are scanned too so rounding in that quotient cannot skip the optimum.
pub fn correction_estimate<T: Scalar>(h_own: T, h_min: T, h_max: T, kappa: T) -> T {
    let a = h_own - h_max;
    let b = h_own - h_min;
    let crossing = (h_max - h_min) / (T::lit(8.0) * kappa);
    let base = if crossing > T::zero() {
        Scalar::floor(crossing).to_u64().unwrap_or(u64::MAX / 8)
    } else {
        0
    };
    let term = |s: u64| {
        let step = T::from_count(4 * s) * kappa;
        (a + step).max_of(b - step)
    };
    let mut best = term(0);
    for s in [base.saturating_sub(1), base, base + 1, base + 2] {
        best = best.min_of(term(s));
    }
    best - kappa / T::lit(2.0)
}

/// Correction applied to the own-copy arrival time. An absent `h_max` forces
/// the lower branch.
pub fn compute_correction<T: Scalar>(h_own: T, h_min: T, h_max: Option<T>, kappa: T, theta: T) -> Correction<T> {
    let three_halves = T::lit(1.5) * kappa;
    let lower = |estimate| Correction {
        value: (h_own - h_min + three_halves).min_of(T::zero()),
        estimate,
        branch: Branch::Lower,
    };
    let Some(h_max) = h_max else {
        return lower(None);
    };
    let est = correction_estimate(h_own, h_min, h_max, kappa);
    if est < T::zero() {
        lower(Some(est))
    } else if est > theta * kappa {
        Correction {
            value: (h_own - h_max - three_halves).max_of(theta * kappa),
            estimate: Some(est),
            branch: Branch::Upper,
        }
    } else {
        Correction { value: est, estimate: Some(est), branch: Branch::Direct }
    }
}

/// The term of the listening-loop exit threshold that was the minimum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// `h_max + kappa/2 + theta kappa`
    Max = 1,
    /// `2 h_own - h_min + 2 kappa`
    Own = 2,
}

/// Local time at which the listening loop ends, and which term set it.
/// `None` until some neighbor has been heard, or if both terms are unbounded.
pub fn listen_threshold<T: Scalar>(
    h_own: Option<T>,
    h_min: Option<T>,
    h_max: Option<T>,
    p: &Params<T>,
) -> Option<(T, Arm)> {
    let h_min = h_min?;
    let two = T::lit(2.0);
    let by_max = h_max.map(|m| m + (p.kappa / two + p.theta * p.kappa));
    let by_own = h_own.map(|o| two * o - h_min + two * p.kappa);
    match (by_max, by_own) {
        (Some(x), Some(y)) if y < x => Some((y, Arm::Own)),
        (Some(x), _) => Some((x, Arm::Max)),
        (None, Some(y)) => Some((y, Arm::Own)),
        (None, None) => None,
    }
}

/// Pulse local time after correction `c` relative to the own-copy arrival.
pub fn pulse_from_own<T: Scalar>(h_own: T, c: T, p: &Params<T>) -> T {
    h_own + p.forward_wait() - c
}

/// Pulse local time when the loop ended on the latest-neighbor term.
pub fn pulse_from_max<T: Scalar>(h_max: T, p: &Params<T>) -> T {
    h_max + T::lit(1.5) * p.kappa + p.forward_wait()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerKind {
    Listen,
    Pulse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Input<T> {
    /// Pulse heard on `slot` at hardware time `local`.
    Message { slot: Slot, local: T },
    /// A previously requested timer reached hardware time `local`.
    Timer { kind: TimerKind, local: T },
}

/// What one iteration observed, reported with the pulse it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSnapshot<T> {
    pub h_own: Option<T>,
    pub h_min: Option<T>,
    pub h_max: Option<T>,
    /// Correction used, or the one implied by the own-copy arrival when the
    /// loop ended on the latest-neighbor term.
    pub correction: Option<T>,
    pub arm: Option<Arm>,
    pub pulse_local: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Emitted<T> {
    pub local: T,
    pub snapshot: Option<IterationSnapshot<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Output<T> {
    pub timers: Vec<(TimerKind, T)>,
    pub pulse: Option<Emitted<T>>,
}

impl<T> Default for Output<T> {
    fn default() -> Self {
        Self { timers: Vec::new(), pulse: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Collecting arrival times for the current pulse.
    Listening,
    /// Loop ended; pulse scheduled.
    WaitingToPulse,
    /// Pulse sent; late messages of the same pulse are dropped until a quiet gap.
    Idle,
}

/// Arrival bookkeeping shared by both listening variants.
#[derive(Clone, Debug, PartialEq)]
struct Arrivals<T> {
    h_own: Option<T>,
    h_min: Option<T>,
    h_max: Option<T>,
    heard: Vec<bool>,
}

impl<T: Scalar> Arrivals<T> {
    fn new(degree: usize) -> Self {
        Self { h_own: None, h_min: None, h_max: None, heard: vec![false; degree] }
    }

    fn clear(&mut self) {
        self.h_own = None;
        self.h_min = None;
        self.h_max = None;
        self.heard.iter_mut().for_each(|f| *f = false);
    }

    fn record(&mut self, slot: Slot, h: T) {
        if slot == 0 {
            self.h_own.get_or_insert(h);
            return;
        }
        let Some(flag) = self.heard.get(slot - 1).copied() else {
            return;
        };
        if flag {
            return;
        }
        if !self.heard.iter().any(|&f| f) {
            self.h_min = Some(h);
        }
        self.heard[slot - 1] = true;
        if self.heard.iter().all(|&f| f) {
            self.h_max = Some(h);
        }
    }

    fn is_empty(&self) -> bool {
        self.h_own.is_none() && !self.heard.iter().any(|&f| f)
    }

    fn corrupt(&mut self, rng: &mut impl Rng, lo: T, hi: T) {
        let draw = |rng: &mut _| rng::uniform(rng, lo, hi);
        self.h_own = rng.random_bool(0.5).then(|| draw(rng));
        self.h_min = rng.random_bool(0.5).then(|| draw(rng));
        self.h_max = rng.random_bool(0.5).then(|| draw(rng));
        for f in &mut self.heard {
            *f = rng.random_bool(0.5);
        }
    }
}

/// State of the deployed listening algorithm at one node.
///
/// A listening phase opens at the first message after a quiet gap of
/// [`Params::quiet_period`]; messages from one slot closer together than that
/// gap are dropped. In a fault-free steady state this coincides with running
/// one loop per pulse; after arbitrary state corruption it realigns the node
/// with the next pulse wave.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState<T> {
    /// Pulses emitted so far.
    pub iteration: u64,
    pub phase: Phase,
    arrivals: Arrivals<T>,
    pub listen_deadline: Option<T>,
    pub scheduled_pulse: Option<T>,
    pub correction: Option<T>,
    pub exit_arm: Option<Arm>,
    last_heard: Option<T>,
    last_heard_from: Vec<Option<T>>,
    late_own: Option<T>,
    pending: Option<IterationSnapshot<T>>,
}

impl<T: Scalar> NodeState<T> {
    /// Fresh state for a node with `degree` base neighbors.
    pub fn new(degree: usize) -> Self {
        Self {
            iteration: 0,
            phase: Phase::Listening,
            arrivals: Arrivals::new(degree),
            listen_deadline: None,
            scheduled_pulse: None,
            correction: None,
            exit_arm: None,
            last_heard: None,
            last_heard_from: vec![None; degree + 1],
            late_own: None,
            pending: None,
        }
    }

    pub fn h_own(&self) -> Option<T> {
        self.arrivals.h_own
    }

    pub fn h_min(&self) -> Option<T> {
        self.arrivals.h_min
    }

    pub fn h_max(&self) -> Option<T> {
        self.arrivals.h_max
    }

    pub fn heard(&self) -> &[bool] {
        &self.arrivals.heard
    }

    /// Timers the engine must keep armed for this state.
    pub fn armed_timers(&self) -> Vec<(TimerKind, T)> {
        let mut out = Vec::new();
        if self.phase == Phase::Listening {
            if let Some(x) = self.listen_deadline {
                out.push((TimerKind::Listen, x));
            }
        }
        if let Some(x) = self.scheduled_pulse {
            out.push((TimerKind::Pulse, x));
        }
        out
    }

    /// Consistency of the listening bookkeeping. Corrupted states may violate it.
    pub fn check_invariants(&self) -> Result<(), String> {
        let a = &self.arrivals;
        let any = a.heard.iter().any(|&f| f);
        let all = a.heard.iter().all(|&f| f);
        if any != a.h_min.is_some() {
            return Err("h_min set iff some neighbor heard".into());
        }
        if all != a.h_max.is_some() {
            return Err("h_max set iff every neighbor heard".into());
        }
        if let (Some(lo), Some(hi)) = (a.h_min, a.h_max) {
            if lo > hi {
                return Err("h_min exceeds h_max".into());
            }
        }
        if self.phase == Phase::WaitingToPulse && self.scheduled_pulse.is_none() {
            return Err("waiting without a scheduled pulse".into());
        }
        Ok(())
    }

    fn open_phase(&mut self) {
        self.arrivals.clear();
        self.listen_deadline = None;
        self.correction = None;
        self.exit_arm = None;
        self.phase = Phase::Listening;
    }

    fn end_loop(&mut self, now: T, arm: Arm, p: &Params<T>, out: &mut Output<T>) {
        let a = &self.arrivals;
        // the latest-neighbor rule only stands in for a missing own copy
        let (target, correction) = match (a.h_own, a.h_max) {
            (Some(own), _) => {
                let h_min = a.h_min.expect("threshold requires h_min");
                let c = compute_correction(own, h_min, a.h_max, p.kappa, p.theta).value;
                (pulse_from_own(own, c, p), Some(c))
            }
            (None, Some(max)) => (pulse_from_max(max, p), None),
            (None, None) => unreachable!("threshold without own copy or latest neighbor"),
        };
        let target = target.max_of(now);
        self.correction = correction;
        self.exit_arm = Some(arm);
        self.listen_deadline = None;
        self.late_own = None;
        self.phase = Phase::WaitingToPulse;
        self.scheduled_pulse = Some(target);
        self.pending = Some(IterationSnapshot {
            h_own: a.h_own,
            h_min: a.h_min,
            h_max: a.h_max,
            correction,
            arm: Some(arm),
            pulse_local: target,
        });
        out.timers.push((TimerKind::Pulse, target));
    }

    fn evaluate(&mut self, now: T, p: &Params<T>, out: &mut Output<T>) {
        let a = &self.arrivals;
        let Some((threshold, arm)) = listen_threshold(a.h_own, a.h_min, a.h_max, p) else {
            return;
        };
        if now >= threshold {
            self.end_loop(now, arm, p, out);
        } else if self.listen_deadline != Some(threshold) {
            self.listen_deadline = Some(threshold);
            out.timers.push((TimerKind::Listen, threshold));
        }
    }

    fn fire(&mut self, p: &Params<T>) -> Emitted<T> {
        self.iteration += 1;
        self.scheduled_pulse = None;
        if self.phase == Phase::WaitingToPulse {
            self.phase = Phase::Idle;
        }
        let mut snapshot = self.pending.take();
        if let Some(s) = snapshot.as_mut() {
            if s.correction.is_none() && s.arm.is_some() {
                if let Some(own) = self.late_own {
                    s.correction = Some(own + p.forward_wait() - s.pulse_local);
                }
            }
        }
        let local = snapshot.as_ref().map(|s| s.pulse_local);
        Emitted { local: local.unwrap_or(T::zero()), snapshot }
    }

    /// Randomizes every field. Timer values are drawn near `now`.
    pub fn corrupt(&mut self, rng: &mut impl Rng, now: T, p: &Params<T>) {
        let lo = now - p.lambda;
        let hi = now + p.lambda;
        self.arrivals.corrupt(rng, lo, hi);
        self.phase = match rng.random_range(0..3) {
            0 => Phase::Listening,
            1 => Phase::WaitingToPulse,
            _ => Phase::Idle,
        };
        self.listen_deadline = rng.random_bool(0.5).then(|| rng::uniform(rng, now, hi));
        self.scheduled_pulse = (self.phase == Phase::WaitingToPulse || rng.random_bool(0.3))
            .then(|| rng::uniform(rng, now, hi));
        self.last_heard = rng.random_bool(0.5).then(|| rng::uniform(rng, lo, hi));
        for x in &mut self.last_heard_from {
            *x = rng.random_bool(0.5).then(|| rng::uniform(rng, lo, hi));
        }
        if let Some(target) = self.scheduled_pulse {
            self.pending = Some(IterationSnapshot {
                h_own: self.arrivals.h_own,
                h_min: self.arrivals.h_min,
                h_max: self.arrivals.h_max,
                correction: None,
                arm: None,
                pulse_local: target,
            });
        }
    }
}

/// Advances the listening algorithm by one input.
pub fn gcs_step<T: Scalar>(state: &mut NodeState<T>, input: Input<T>, p: &Params<T>) -> Output<T> {
    let mut out = Output::default();
    match input {
        Input::Message { slot, local: h } => {
            let quiet = p.quiet_period();
            let Some(last_from) = state.last_heard_from.get(slot).copied() else {
                return out;
            };
            if let Some(prev) = last_from {
                if prev <= h && h - prev < quiet {
                    return out;
                }
            }
            state.last_heard_from[slot] = Some(h);
            let opens = match state.last_heard {
                None => true,
                Some(prev) => prev > h || h - prev >= quiet,
            };
            state.last_heard = Some(h);
            if opens && !(state.phase == Phase::Listening && state.arrivals.is_empty()) {
                state.open_phase();
            }
            match state.phase {
                Phase::Listening => {
                    state.arrivals.record(slot, h);
                    state.evaluate(h, p, &mut out);
                }
                Phase::WaitingToPulse => {
                    if slot == 0 && state.late_own.is_none() {
                        state.late_own = Some(h);
                    }
                }
                Phase::Idle => {}
            }
        }
        Input::Timer { kind: TimerKind::Listen, local } => {
            if state.phase == Phase::Listening && state.listen_deadline == Some(local) {
                let a = &state.arrivals;
                if let Some((threshold, arm)) = listen_threshold(a.h_own, a.h_min, a.h_max, p) {
                    if local >= threshold {
                        state.end_loop(local, arm, p, &mut out);
                    }
                }
            }
        }
        Input::Timer { kind: TimerKind::Pulse, local } => {
            if state.scheduled_pulse == Some(local) {
                out.pulse = Some(state.fire(p));
            }
        }
    }
    out
}

/// Reference variant that waits for every predecessor before computing the
/// correction. Messages heard while a pulse is scheduled are replayed into
/// the next iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplifiedState<T> {
    pub iteration: u64,
    arrivals: Arrivals<T>,
    pub scheduled_pulse: Option<T>,
    pub correction: Option<T>,
    buffer: VecDeque<(Slot, T)>,
    pending: Option<IterationSnapshot<T>>,
}

impl<T: Scalar> SimplifiedState<T> {
    pub fn new(degree: usize) -> Self {
        Self {
            iteration: 0,
            arrivals: Arrivals::new(degree),
            scheduled_pulse: None,
            correction: None,
            buffer: VecDeque::new(),
            pending: None,
        }
    }

    fn try_schedule(&mut self, now: T, p: &Params<T>, out: &mut Output<T>) {
        let a = &self.arrivals;
        let (Some(own), Some(min), Some(max)) = (a.h_own, a.h_min, a.h_max) else {
            return;
        };
        let c = compute_correction(own, min, Some(max), p.kappa, p.theta).value;
        let target = pulse_from_own(own, c, p).max_of(now);
        self.correction = Some(c);
        self.scheduled_pulse = Some(target);
        self.pending = Some(IterationSnapshot {
            h_own: Some(own),
            h_min: Some(min),
            h_max: Some(max),
            correction: Some(c),
            arm: None,
            pulse_local: target,
        });
        out.timers.push((TimerKind::Pulse, target));
    }
}

pub fn simplified_step<T: Scalar>(state: &mut SimplifiedState<T>, input: Input<T>, p: &Params<T>) -> Output<T> {
    let mut out = Output::default();
    match input {
        Input::Message { slot, local } => {
            if state.scheduled_pulse.is_some() {
                state.buffer.push_back((slot, local));
            } else {
                state.arrivals.record(slot, local);
                state.try_schedule(local, p, &mut out);
            }
        }
        Input::Timer { kind: TimerKind::Pulse, local } if state.scheduled_pulse == Some(local) => {
            state.iteration += 1;
            state.scheduled_pulse = None;
            let snapshot = state.pending.take();
            out.pulse = Some(Emitted { local, snapshot });
            state.arrivals.clear();
            while state.scheduled_pulse.is_none() {
                let Some((slot, h)) = state.buffer.pop_front() else { break };
                state.arrivals.record(slot, h);
                state.try_schedule(local, p, &mut out);
            }
        }
        Input::Timer { .. } => {}
    }
    out
}

/// Layer-0 chain relay: forwards `lambda - d` local time after each reception.
/// A later reception replaces the pending forward.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwarderState<T> {
    pub iteration: u64,
    pub heard: Option<T>,
    pub scheduled_pulse: Option<T>,
}

impl<T> Default for ForwarderState<T> {
    fn default() -> Self {
        Self { iteration: 0, heard: None, scheduled_pulse: None }
    }
}

impl<T: Scalar> ForwarderState<T> {
    pub fn corrupt(&mut self, rng: &mut impl Rng, now: T, p: &Params<T>) {
        self.heard = rng.random_bool(0.5).then(|| rng::uniform(rng, now - p.lambda, now));
        self.scheduled_pulse = rng.random_bool(0.5).then(|| rng::uniform(rng, now, now + p.lambda));
    }
}

pub fn layer0_step<T: Scalar>(state: &mut ForwarderState<T>, input: Input<T>, p: &Params<T>) -> Output<T> {
    let mut out = Output::default();
    match input {
        Input::Message { local, .. } => {
            let target = local + p.forward_wait();
            state.heard = Some(local);
            state.scheduled_pulse = Some(target);
            out.timers.push((TimerKind::Pulse, target));
        }
        Input::Timer { kind: TimerKind::Pulse, local } if state.scheduled_pulse == Some(local) => {
            state.iteration += 1;
            state.scheduled_pulse = None;
            out.pulse = Some(Emitted { local, snapshot: None });
        }
        Input::Timer { .. } => {}
    }
    out
}

/// Any of the node programs, as driven by the simulator.
#[derive(Clone, Debug, PartialEq)]
pub enum Machine<T> {
    Gcs(NodeState<T>),
    Simplified(SimplifiedState<T>),
    Forwarder(ForwarderState<T>),
}

impl<T: Scalar> Machine<T> {
    pub fn step(&mut self, input: Input<T>, p: &Params<T>) -> Output<T> {
        match self {
            Self::Gcs(s) => gcs_step(s, input, p),
            Self::Simplified(s) => simplified_step(s, input, p),
            Self::Forwarder(s) => layer0_step(s, input, p),
        }
    }

    pub fn iteration(&self) -> u64 {
        match self {
            Self::Gcs(s) => s.iteration,
            Self::Simplified(s) => s.iteration,
            Self::Forwarder(s) => s.iteration,
        }
    }

    pub fn armed_timers(&self) -> Vec<(TimerKind, T)> {
        match self {
            Self::Gcs(s) => s.armed_timers(),
            Self::Simplified(s) => s.scheduled_pulse.map(|x| (TimerKind::Pulse, x)).into_iter().collect(),
            Self::Forwarder(s) => s.scheduled_pulse.map(|x| (TimerKind::Pulse, x)).into_iter().collect(),
        }
    }

    pub fn corrupt(&mut self, rng: &mut impl Rng, now: T, p: &Params<T>) {
        match self {
            Self::Gcs(s) => s.corrupt(rng, now, p),
            Self::Simplified(_) => {}
            Self::Forwarder(s) => s.corrupt(rng, now, p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    fn unit() -> Params<f64> {
        // kappa = 1, theta = 1.2 for the hand-worked cases.
        let mut p = Params::new(1.0, 0.5, 1.2, 30.0, 2.0).unwrap();
        p.kappa = 1.0;
        p
    }

    fn scan(h_own: f64, h_min: f64, h_max: f64, kappa: f64) -> f64 {
        let mut best = f64::INFINITY;
        for s in 0..10_000u32 {
            let s = f64::from(s);
            best = best.min((h_own - h_max + 4.0 * s * kappa).max(h_own - h_min - 4.0 * s * kappa));
        }
        best - kappa / 2.0
    }

    #[test]
    fn worked_corrections() {
        let cases = [
            (100.0f64, 100.0, 100.0, -0.5, 0.0),
            (10.0, 8.0, 12.0, 1.5, 1.2),
            (20.0, 8.0, 12.0, 11.5, 6.5),
            (5.0, 10.0, 12.0, -5.5, -3.5),
            (10.0, 9.2, 10.4, 0.30000000000000004, 0.30000000000000004),
        ];
        for (own, min, max, est, c) in cases {
            let r = compute_correction(own, min, Some(max), 1.0, 1.2);
            assert!((r.estimate.unwrap() - est).abs() < 1e-12, "{own} {min} {max}");
            assert!((r.value - c).abs() < 1e-12, "{own} {min} {max}: {}", r.value);
            assert_eq!(r.estimate.unwrap(), scan(own, min, max, 1.0));
        }
    }

    #[test]
    fn missing_latest_neighbor_takes_lower_branch() {
        let r = compute_correction(10.0, 8.0, None, 1.0, 1.2);
        assert_eq!(r.branch, Branch::Lower);
        assert_eq!(r.value, 0.0);
        assert_eq!(compute_correction(5.0, 10.0, None, 1.0, 1.2).value, -3.5);
    }

    #[test]
    fn threshold_example() {
        let p = unit();
        let (x, arm) = listen_threshold(Some(100.0), Some(100.0), Some(100.0), &p).unwrap();
        assert!((x - 101.7).abs() < 1e-12);
        assert_eq!(arm, Arm::Max);
        assert!(listen_threshold(Some(1.0), None, None, &p).is_none());
        assert_eq!(listen_threshold(Some(10.0), Some(8.0), None, &p), Some((14.0, Arm::Own)));
    }

    // The lower-branch value written as `own - min - kappa/2 + 2 kappa` equals
    // the `+ 3 kappa / 2` form used here, exactly.
    #[test]
    fn lower_branch_forms_agree_exactly() {
        let r = |n: i64| Ratio::<i64>::new(n, 37);
        for (own, min, max) in [(r(5), r(9), r(40)), (r(-3), r(1), r(2)), (r(0), r(0), r(100))] {
            let k = r(11);
            let c = compute_correction(own, min, Some(max), k, r(40));
            let alt = (own - min - k / Ratio::from_integer(2) + Ratio::from_integer(2) * k).min(r(0));
            if c.branch == Branch::Lower {
                assert_eq!(c.value, alt);
            }
        }
    }

    fn feed(state: &mut NodeState<f64>, p: &Params<f64>, inputs: &[(Slot, f64)]) -> Vec<Output<f64>> {
        inputs.iter().map(|&(slot, local)| gcs_step(state, Input::Message { slot, local }, p)).collect()
    }

    #[test]
    fn full_step_all_equal() {
        let p = unit();
        let mut s = NodeState::new(2);
        let outs = feed(&mut s, &p, &[(0, 100.0), (1, 100.0), (2, 100.0)]);
        let timer = outs.last().unwrap().timers[0];
        assert_eq!(timer.0, TimerKind::Listen);
        assert!((timer.1 - 101.7).abs() < 1e-12);
        let out = gcs_step(&mut s, Input::Timer { kind: TimerKind::Listen, local: timer.1 }, &p);
        let (kind, at) = out.timers[0];
        assert_eq!(kind, TimerKind::Pulse);
        assert_eq!(at, 101.0 + 28.0);
        assert_eq!(s.phase, Phase::WaitingToPulse);
        let out = gcs_step(&mut s, Input::Timer { kind: TimerKind::Pulse, local: at }, &p);
        let snap = out.pulse.unwrap().snapshot.unwrap();
        assert_eq!(snap.arm, Some(Arm::Max));
        assert_eq!(snap.correction, Some(0.0));
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn full_step_missing_own() {
        let p = unit();
        let mut s = NodeState::new(2);
        let outs = feed(&mut s, &p, &[(1, 49.9), (2, 50.0)]);
        assert!((outs[1].timers[0].1 - 51.7).abs() < 1e-12);
        let out = gcs_step(&mut s, Input::Timer { kind: TimerKind::Listen, local: outs[1].timers[0].1 }, &p);
        let at = out.timers[0].1;
        assert_eq!(at, 50.0 + 1.5 + p.forward_wait());
        feed(&mut s, &p, &[(0, 52.0)]);
        let snap = gcs_step(&mut s, Input::Timer { kind: TimerKind::Pulse, local: at }, &p).pulse.unwrap().snapshot;
        assert_eq!(snap.unwrap().correction, Some(52.0 + p.forward_wait() - at));
    }

    #[test]
    fn full_step_missing_neighbor() {
        let p = unit();
        let mut s = NodeState::new(2);
        let outs = feed(&mut s, &p, &[(1, 8.0), (0, 10.0)]);
        assert_eq!(outs[1].timers, vec![(TimerKind::Listen, 14.0)]);
        let out = gcs_step(&mut s, Input::Timer { kind: TimerKind::Listen, local: 14.0 }, &p);
        assert_eq!(out.timers, vec![(TimerKind::Pulse, 10.0 + p.forward_wait())]);
        assert_eq!(s.correction, Some(0.0));
        // The straggler is ignored once the loop ended.
        feed(&mut s, &p, &[(2, 12.5)]);
        assert_eq!(s.h_max(), None);
    }

    #[test]
    fn quiet_gap_opens_new_phase() {
        let p = unit();
        let mut s = NodeState::new(2);
        feed(&mut s, &p, &[(1, 0.0)]);
        assert_eq!(s.h_min(), Some(0.0));
        feed(&mut s, &p, &[(2, 10.0)]);
        assert_eq!(s.h_min(), Some(10.0));
        assert_eq!(s.heard(), &[false, true]);
        // Same slot again within the quiet period: dropped.
        feed(&mut s, &p, &[(2, 11.0)]);
        assert_eq!(s.h_max(), None);
    }

    #[test]
    fn stale_timers_ignored() {
        let p = unit();
        let mut s = NodeState::new(2);
        feed(&mut s, &p, &[(1, 8.0), (0, 10.0)]);
        let out = gcs_step(&mut s, Input::Timer { kind: TimerKind::Listen, local: 13.0 }, &p);
        assert_eq!(out, Output::default());
        let out = gcs_step(&mut s, Input::Timer { kind: TimerKind::Pulse, local: 13.0 }, &p);
        assert_eq!(out, Output::default());
    }

    #[test]
    fn simplified_waits_for_all() {
        let p = unit();
        let mut s = SimplifiedState::new(2);
        let mut step = |slot, local| simplified_step(&mut s, Input::Message { slot, local }, &p);
        assert!(step(1, 8.0).timers.is_empty());
        assert!(step(0, 10.0).timers.is_empty());
        let out = step(2, 12.0);
        assert_eq!(out.timers, vec![(TimerKind::Pulse, pulse_from_own(10.0, 1.2, &p))]);
    }

    #[test]
    fn simplified_replays_buffer() {
        let p = unit();
        let mut s = SimplifiedState::new(2);
        for (slot, h) in [(0, 1.0), (1, 1.0), (2, 1.0)] {
            simplified_step(&mut s, Input::Message { slot, local: h }, &p);
        }
        let at = s.scheduled_pulse.unwrap();
        for (slot, h) in [(0, 2.0), (1, 2.0), (2, 2.0)] {
            simplified_step(&mut s, Input::Message { slot, local: h }, &p);
        }
        let out = simplified_step(&mut s, Input::Timer { kind: TimerKind::Pulse, local: at }, &p);
        assert!(out.pulse.is_some());
        assert_eq!(out.timers.len(), 1);
        assert_eq!(s.iteration, 1);
    }

    #[test]
    fn forwarder_reschedules() {
        let p = unit();
        let mut s = ForwarderState::default();
        layer0_step(&mut s, Input::Message { slot: 0, local: 3.0 }, &p);
        let out = layer0_step(&mut s, Input::Message { slot: 0, local: 4.0 }, &p);
        assert_eq!(out.timers, vec![(TimerKind::Pulse, 4.0 + p.forward_wait())]);
        let out = layer0_step(&mut s, Input::Timer { kind: TimerKind::Pulse, local: 3.0 + p.forward_wait() }, &p);
        assert!(out.pulse.is_none());
    }

    proptest! {
        #[test]
        fn estimate_matches_scan(
            own in -50.0f64..50.0, min in -50.0f64..50.0, spread in 0.0f64..60.0, kappa in 0.1f64..3.0,
        ) {
            let max = min + spread;
            prop_assert_eq!(correction_estimate(own, min, max, kappa), scan(own, min, max, kappa));
        }

        #[test]
        fn correction_bounded(own in -50.0f64..50.0, min in -50.0f64..50.0, spread in 0.0f64..60.0) {
            let max = min + spread;
            let c = compute_correction(own, min, Some(max), 1.0, 1.2).value;
            prop_assert!(c <= (own - max - 1.5).max(1.2));
            prop_assert!(c >= (own - min + 1.5).min(0.0));
        }

        #[test]
        fn invariants_hold_under_any_message_order(
            msgs in proptest::collection::vec((0usize..4, 0.0f64..0.05), 1..30),
        ) {
            let p = unit();
            let mut s = NodeState::new(3);
            let mut now = 0.0;
            for (slot, dt) in msgs {
                now += dt;
                let out = gcs_step(&mut s, Input::Message { slot, local: now }, &p);
                prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
                for (kind, at) in out.timers {
                    prop_assert!(at >= now);
                    if kind == TimerKind::Pulse {
                        prop_assert_eq!(s.phase, Phase::WaitingToPulse);
                    }
                }
            }
        }
    }
}
