//! Acceptance criteria A1-A11. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ftgcs::analysis::{default_s_max, floor_log2, Analysis};
use ftgcs::engine::{CorruptionSpec, MachineKind, PulseTrace, RunConfig, RunStatus, SourceMode};
use ftgcs::faults::{FaultBehavior, FaultKind};
use ftgcs::protocol::compute_correction;
use ftgcs::scalar::exact_ratio;
use ftgcs::timing::Params;
use ftgcs::topology::NodeId;

type Q = Ratio<i128>;

/// Relative tolerance of the period check; every other bound is exact.
const PERIOD_TOLERANCE: f64 = 1e-9;
/// Constant for the static-fault steady-state bound `L <= c kappa log2 D`.
const STEADY_STATE_C: f64 = 32.0;
/// Stabilization must happen within this many multiples of `sqrt(n)` pulses.
const STABILIZATION_FACTOR: f64 = 4.0;
/// Seeds per topology whose potentials are recomputed in exact rationals.
const EXACT_SEEDS: u64 = 3;

fn params() -> Params<f64> {
    Params::new(1.0, 0.002, 1.0002, 2.0, 2.0).unwrap()
}

fn exact_params() -> Params<Q> {
    let q = |n, d| Q::new(n, d);
    Params::new(q(1, 1), q(1, 500), q(5001, 5000), q(2, 1), q(2, 1)).unwrap()
}

/// `4 kappa (2 + log2 D)`, computed here rather than taken from the library.
fn fault_free_bound(kappa: f64, diameter: u32) -> f64 {
    4.0 * kappa * (2.0 + f64::from(diameter).log2())
}

struct Verdict {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, pass, detail }
}

struct FaultFreeRun {
    m: usize,
    seed: u64,
    graph: ftgcs::topology::LayeredGraph,
    full: PulseTrace<f64>,
    simplified: PulseTrace<f64>,
}

fn fault_free_runs() -> Vec<FaultFreeRun> {
    let p = params();
    let mut out = Vec::new();
    for m in [8, 16, 32] {
        for seed in 0..50 {
            let mut cfg = RunConfig::line(m, 40, p, 20, seed);
            let full = cfg.run().unwrap();
            cfg.machine = MachineKind::Simplified;
            let simplified = cfg.run().unwrap();
            out.push(FaultFreeRun { m, seed, graph: cfg.graph().unwrap(), full, simplified });
        }
    }
    out
}

fn a1(runs: &[FaultFreeRun]) -> Verdict {
    let p = params();
    let mut worst_ratio = 0.0f64;
    let mut bad = Vec::new();
    for r in runs {
        let d = r.graph.base().diameter();
        let bound = fault_free_bound(p.kappa, d);
        let a = Analysis::new(&r.graph, &p, &r.full);
        let skew = a.local_skew();
        let complete = r.full.status == RunStatus::Completed;
        for (l, w) in skew.intra.iter().enumerate() {
            let Some(w) = w else { continue };
            worst_ratio = worst_ratio.max(w.value / bound);
            if w.value > bound {
                bad.push(format!("m={} seed={} layer {l}: {} > {bound}", r.m, r.seed, w.value));
            }
        }
        if !complete || skew.intra.iter().any(Option::is_none) {
            bad.push(format!("m={} seed={}: incomplete ({:?})", r.m, r.seed, r.full.status));
        }
    }
    verdict(
        "A1",
        bad.is_empty(),
        format!("{} runs, worst L_l / bound = {worst_ratio:.4}{}", runs.len(), first(&bad)),
    )
}

fn a2(runs: &[FaultFreeRun]) -> Verdict {
    let p = params();
    let mut checked = 0;
    let mut bad = Vec::new();
    for r in runs {
        let a = Analysis::new(&r.graph, &p, &r.full);
        let rep = a.check_conditions(default_s_max(r.graph.base().diameter()));
        checked += rep.checked;
        for f in rep.failures.iter().take(2) {
            bad.push(format!("m={} seed={}: {} wave {} {}", r.m, r.seed, f.node, f.wave, f.condition));
        }
    }
    verdict("A2", bad.is_empty() && checked > 0, format!("{checked} condition instances{}", first(&bad)))
}

fn a3(runs: &[FaultFreeRun]) -> Verdict {
    let bad: Vec<String> = runs
        .iter()
        .filter(|r| !r.full.same_pulse_times(&r.simplified) || r.simplified.status != RunStatus::Completed)
        .map(|r| format!("m={} seed={}", r.m, r.seed))
        .collect();
    verdict("A3", bad.is_empty(), format!("{} run pairs bit-identical{}", runs.len() - bad.len(), first(&bad)))
}

fn a4() -> Verdict {
    let p = params();
    let mut bad = Vec::new();
    let mut runs = 0;
    for m in [8, 16, 32] {
        for seed in 0..10 {
            let mut cfg = RunConfig::line(m, 2, p, 20, seed);
            cfg.source = SourceMode::Chain;
            let trace = cfg.run().unwrap();
            let g = cfg.graph().unwrap();
            let v = Analysis::new(&g, &p, &trace).check_chain();
            runs += 1;
            let chain = g.base().chain().unwrap();
            // independent oracle for the interval
            for vtx in 0..g.num_vertices() as u32 {
                let i = chain.hop_index(vtx).unwrap() as f64;
                for k in 1..=20u64 {
                    let Some(t) = trace.time(NodeId::new(0, vtx), k) else {
                        bad.push(format!("m={m} seed={seed}: vertex {vtx} missing pulse {k}"));
                        continue;
                    };
                    let hi = (k as f64 + i - 1.0) * p.lambda;
                    let lo = hi - i * p.kappa / 2.0;
                    if t < lo || t > hi {
                        bad.push(format!("m={m} seed={seed}: vertex {vtx} pulse {k} at {t} outside [{lo}, {hi}]"));
                    }
                }
            }
            if !v.is_empty() {
                bad.push(format!("m={m} seed={seed}: {}", v[0]));
            }
        }
    }
    verdict("A4", bad.is_empty(), format!("{runs} chain runs{}", first(&bad)))
}

fn behaviors_a5(rng: &mut ChaCha8Rng, layer: u32, lambda: f64, kappa: f64, pulses: u64) -> FaultKind<f64> {
    match rng.random_range(0..5) {
        0 => FaultKind::Silent,
        1 => FaultKind::FixedOffset { offset: lambda / 4.0 },
        2 => FaultKind::FixedOffset { offset: -lambda / 4.0 },
        3 => FaultKind::Burst { count: 3, spacing: kappa },
        _ => {
            let mut times: Vec<f64> = (1..=pulses)
                .map(|k| (k as f64 - 1.0 + f64::from(layer)) * lambda + rng.random_range(-lambda / 2.0..lambda / 2.0))
                .collect();
            times.sort_by(f64::total_cmp);
            FaultKind::Scripted { times }
        }
    }
}

fn a5() -> Verdict {
    let p = params();
    let (layers, pulses) = (12, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5);
    let mut bad = Vec::new();
    let mut checked = 0;
    let mut kinds = std::collections::BTreeMap::new();
    for trial in 0..200u64 {
        let node = NodeId::new(rng.random_range(1..layers - 1), rng.random_range(0..20));
        let kind = behaviors_a5(&mut rng, node.layer, p.lambda, p.kappa, pulses);
        *kinds.entry(kind.name()).or_insert(0) += 1;
        let mut cfg = RunConfig::line(16, layers, p, pulses, trial);
        cfg.faults.placement.nodes.insert(node, FaultBehavior::broadcast(kind.clone()));
        let trace = cfg.run().unwrap();
        let g = cfg.graph().unwrap();
        let successors: Vec<NodeId> = g.successors(node).into_iter().map(|(n, _)| n).collect();
        let v = Analysis::new(&g, &p, &trace).check_fault_envelope();
        checked += successors.len();
        if trace.status != RunStatus::Completed {
            bad.push(format!("trial {trial} {} at {node}: {:?}", kind.name(), trace.status));
        }
        for x in v.iter().filter(|x| successors.contains(&x.node)).take(1) {
            bad.push(format!("trial {trial} {} at {node}: {x}", kind.name()));
        }
    }
    verdict("A5", bad.is_empty(), format!("200 trials {kinds:?}, {checked} successors checked{}", first(&bad)))
}

/// Static faults on distinct layers, for A6 and A7.
fn static_fault_runs() -> Vec<(u32, String, RunConfig<f64>, PulseTrace<f64>)> {
    let p = params();
    let behaviors = [
        FaultKind::Silent,
        FaultKind::FixedOffset { offset: p.lambda / 4.0 },
        FaultKind::FixedOffset { offset: -p.lambda / 4.0 },
        FaultKind::FixedOffset { offset: 2.0 * p.kappa },
        FaultKind::FixedOffset { offset: -2.0 * p.kappa },
    ];
    let mut out = Vec::new();
    for f in 1..=3u32 {
        for b in &behaviors {
            for seed in 0..4 {
                let mut cfg = RunConfig::line(16, 20, p, 20, 100 + seed);
                for j in 0..f {
                    // same column, alternating sign for the offsets
                    let kind = match (b, j % 2) {
                        (FaultKind::FixedOffset { offset }, 1) => FaultKind::FixedOffset { offset: -offset },
                        _ => b.clone(),
                    };
                    cfg.faults.placement.nodes.insert(NodeId::new(3 + 4 * j, 9), FaultBehavior::broadcast(kind));
                }
                let trace = cfg.run().unwrap();
                out.push((f, format!("{b:?}"), cfg, trace));
            }
        }
    }
    out
}

fn a6(runs: &[(u32, String, RunConfig<f64>, PulseTrace<f64>)]) -> Verdict {
    let p = params();
    let mut bad = Vec::new();
    let mut worst = [0.0f64; 4];
    for (f, name, cfg, trace) in runs {
        let g = cfg.graph().unwrap();
        let d = g.base().diameter();
        let bound = fault_free_bound(p.kappa, d) * 5f64.powi(*f as i32) * 1.25;
        let skew = Analysis::new(&g, &p, trace).local_skew();
        match skew.max_intra() {
            Some(l) => {
                worst[*f as usize] = worst[*f as usize].max(l / bound);
                if l > bound {
                    bad.push(format!("f={f} {name}: {l} > {bound}"));
                }
            }
            None => bad.push(format!("f={f} {name}: no complete wave")),
        }
    }
    verdict(
        "A6",
        bad.is_empty(),
        format!(
            "{} runs, worst L_l / B_f: f=1 {:.4}, f=2 {:.4}, f=3 {:.4}{}",
            runs.len(),
            worst[1],
            worst[2],
            worst[3],
            first(&bad)
        ),
    )
}

fn a7(runs: &[(u32, String, RunConfig<f64>, PulseTrace<f64>)]) -> Verdict {
    let p = params();
    let mut bad = Vec::new();
    let mut c_max = 0.0f64;
    for (f, name, cfg, trace) in runs {
        let g = cfg.graph().unwrap();
        let log_d = f64::from(g.base().diameter()).log2();
        let a = Analysis::new(&g, &p, trace);
        let waves = a.complete_waves();
        // independent period oracle over complete waves, first pair skipped
        for node in g.nodes().filter(|n| trace.is_correct(*n)) {
            for pair in waves.windows(2).skip(1) {
                let (Some(x), Some(y)) = (a.waves.time(g.index(node), pair[0]), a.waves.time(g.index(node), pair[1]))
                else {
                    continue;
                };
                if (y - x - p.lambda).abs() > PERIOD_TOLERANCE * p.lambda {
                    bad.push(format!("f={f} {name}: {node} period {} at wave {}", y - x, pair[1]));
                }
            }
        }
        if !a.period_consistency().is_empty() {
            bad.push(format!("f={f} {name}: period_consistency reports {}", a.period_consistency()[0]));
        }
        if let Some(l) = a.local_skew().overall() {
            let c = l / (p.kappa * log_d);
            c_max = c_max.max(c);
            if c > STEADY_STATE_C {
                bad.push(format!("f={f} {name}: L = {l} gives c = {c}"));
            }
        }
    }
    verdict(
        "A7",
        bad.is_empty(),
        format!("{} runs, measured c = {c_max:.3} (limit {STEADY_STATE_C}){}", runs.len(), first(&bad)),
    )
}

fn a8() -> Verdict {
    let p = params();
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    let mut trials = 0;
    for m in [16, 32] {
        let n = (m + 4) * m;
        let limit = STABILIZATION_FACTOR * (n as f64).sqrt();
        let pulses = limit.ceil() as u64 + 8;
        for seed in 0..20 {
            let mut cfg = RunConfig::line(m, m as u32, p, pulses, seed);
            cfg.source = SourceMode::Chain;
            let reference = cfg.run().unwrap();
            let mut scenario = cfg.build().unwrap();
            assert_eq!(scenario.graph.num_nodes(), n);
            scenario.corruption = Some(CorruptionSpec { spurious_messages: n, corrupt_fraction: 1.0 });
            scenario.check_alignment = false;
            let trace = ftgcs::engine::simulate(&scenario).unwrap();
            trials += 1;
            match ftgcs::analysis::stabilization_pulse(&trace, &reference, p.lambda, p.kappa) {
                Some(k) => {
                    worst = worst.max(k as f64 / (n as f64).sqrt());
                    if k as f64 > limit {
                        bad.push(format!("m={m} seed={seed}: pulse {k} > {limit:.1}"));
                    }
                }
                None => bad.push(format!("m={m} seed={seed}: not stabilized within {pulses} pulses")),
            }
        }
    }
    verdict(
        "A8",
        bad.is_empty(),
        format!("{trials} trials, worst pulse / sqrt(n) = {worst:.3} (limit {STABILIZATION_FACTOR}){}", first(&bad)),
    )
}

fn a9(runs: &[FaultFreeRun]) -> Verdict {
    let p = params();
    let mut bad = Vec::new();
    let mut exact_runs = 0;
    let mut worst = 0.0f64;
    for r in runs {
        let d = r.graph.base().diameter();
        let top = floor_log2(d);
        let a = Analysis::new(&r.graph, &p, &r.full);
        let table = a.potentials(top);
        for s in 0..=top {
            let bound = 2f64.powi(2 - s as i32) * p.kappa * f64::from(d);
            if let Some(x) = table.max_psi(s) {
                worst = worst.max(x / bound);
                if x > bound {
                    bad.push(format!("m={} seed={} s={s}: {x} > {bound}", r.m, r.seed));
                }
            }
        }
        let grid: Vec<u32> = (0..r.graph.num_layers()).step_by(3).collect();
        if let Some(v) = a.check_psi_bound(&table, &grid).first() {
            bad.push(format!("m={} seed={}: psi bound s={} {}..{} wave {}", r.m, r.seed, v.s, v.low, v.high, v.wave));
        }
        if r.seed < EXACT_SEEDS {
            let q = exact_params();
            let trace = r.full.map(|x| exact_ratio(x).expect("finite time"));
            let a = Analysis::new(&r.graph, &q, &trace);
            let table = a.potentials(top);
            for s in 0..=top {
                let bound = Q::from_integer(4) / Q::from_integer(1 << s) * q.kappa * Q::from_integer(i128::from(d));
                if table.max_psi(s).is_some_and(|x| x > bound) {
                    bad.push(format!("m={} seed={} s={s}: exact potential above bound", r.m, r.seed));
                }
            }
            if !a.check_psi_bound(&table, &grid).is_empty() {
                bad.push(format!("m={} seed={}: exact psi bound fails", r.m, r.seed));
            }
            exact_runs += 1;
        }
    }
    verdict(
        "A9",
        bad.is_empty(),
        format!("{} runs ({exact_runs} also exact), worst Psi / bound = {worst:.4}{}", runs.len(), first(&bad)),
    )
}

type R = Ratio<i64>;

/// Brute-force correction: scan `s` well past the optimum, then apply the branches.
fn correction_oracle(own: R, min: R, max: Option<R>, kappa: R, theta: R) -> R {
    let half = kappa / 2;
    let Some(max) = max else {
        return (own - min + kappa * 3 / 2).min(R::from_integer(0));
    };
    let limit = ((max - min) / kappa).to_integer().max(0) + 4;
    let delta = (0..=limit)
        .map(|s| (own - max + kappa * 4 * s).max(own - min - kappa * 4 * s))
        .min()
        .unwrap()
        - half;
    if delta < R::from_integer(0) {
        (own - min + kappa * 3 / 2).min(R::from_integer(0))
    } else if delta > theta * kappa {
        (own - max - kappa * 3 / 2).max(theta * kappa)
    } else {
        delta
    }
}

fn a10() -> Verdict {
    let r = |n: i64, d: i64| R::new(n, d);
    let mut bad = Vec::new();
    let (kappa, theta) = (r(1, 1), r(6, 5));
    let examples = [
        ((100, 1), (100, 1), (100, 1), r(0, 1)),
        ((10, 1), (8, 1), (12, 1), r(6, 5)),
        ((20, 1), (8, 1), (12, 1), r(13, 2)),
        ((5, 1), (10, 1), (12, 1), r(-7, 2)),
        ((10, 1), (46, 5), (52, 5), r(3, 10)),
    ];
    for ((o, od), (mn, mnd), (mx, mxd), want) in examples {
        let got = compute_correction(r(o, od), r(mn, mnd), Some(r(mx, mxd)), kappa, theta).value;
        if got != want {
            bad.push(format!("example ({o}/{od}, {mn}/{mnd}, {mx}/{mxd}): {got} != {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xA10);
    let n = 100_000;
    for i in 0..n {
        let kappa = r(rng.random_range(1..=16), 8);
        let theta = r(1000 + rng.random_range(0..500), 1000);
        let mut v = [0i64; 3].map(|_| r(rng.random_range(-800..=800), 16));
        let own = v[0];
        v[1..].sort();
        let (min, max) = (v[1], v[2]);
        let max = (rng.random_range(0..10) != 0).then_some(max);
        let got = compute_correction(own, min, max, kappa, theta).value;
        let want = correction_oracle(own, min, max, kappa, theta);
        if got != want {
            bad.push(format!("input {i}: ({own}, {min}, {max:?}, {kappa}, {theta}) gives {got}, oracle {want}"));
        }
    }
    verdict("A10", bad.is_empty(), format!("5 examples, {n} random inputs{}", first(&bad)))
}

const A11_BASE: &str = r#"
[topology]
kind = "replicated_line"
m = 6
layers = 6

[params]
d = 1.0
u = 0.002
theta = 1.0002
lambda = 2.0

[run]
pulses = 8
seed = 4
record_events = true

[[faults.node]]
layer = 2
vertex = 3
kind = "fixed_offset"
offset = 0.5
"#;

fn a11() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let plain = format!("{A11_BASE}\n[experiment]\nseeds = [1, 2]\n[[experiment.axis]]\npath = \"params.u\"\nvalues = [0.001, 0.002]\n");
    let mc = A11_BASE.replace("[[faults.node]]\nlayer = 2\nvertex = 3\nkind = \"fixed_offset\"\noffset = 0.5\n", "")
        + "\n[faults]\nprobability = 0.05\nbehaviors = [{ kind = \"silent\" }, { kind = \"fixed_offset\", offset = -0.5 }]\n[experiment]\ntrials = 6\n";
    std::fs::write(dir.join("plain.toml"), &plain).unwrap();
    std::fs::write(dir.join("mc.toml"), &mc).unwrap();
    let commands: [(&str, &str); 4] = [("run", "plain"), ("sweep", "plain"), ("stabilize", "plain"), ("faults-mc", "mc")];
    let mut bad = Vec::new();
    let mut files = 0;
    for (cmd, cfg) in commands {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = dir.join(format!("{cmd}-{rep}"));
            let status = Command::new(env!("CARGO_BIN_EXE_ftgcs"))
                .args([cmd, "--config"])
                .arg(dir.join(format!("{cfg}.toml")))
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap();
            if status.status.code() == Some(2) {
                bad.push(format!("{cmd}: {}", String::from_utf8_lossy(&status.stderr)));
            }
            outs.push(out);
        }
        files += compare_dirs(&outs[0], &outs[1], cmd, &mut bad);
    }
    let mut outs = Vec::new();
    for rep in 0..2 {
        let out = dir.join(format!("verify-{rep}"));
        Command::new(env!("CARGO_BIN_EXE_ftgcs")).arg("verify").arg(dir.join("run-0")).arg("--out").arg(&out).output().unwrap();
        outs.push(out);
    }
    files += compare_dirs(&outs[0], &outs[1], "verify", &mut bad);
    verdict("A11", bad.is_empty() && files >= 10, format!("5 subcommands, {files} files byte-identical{}", first(&bad)))
}

fn compare_dirs(a: &Path, b: &Path, cmd: &str, bad: &mut Vec<String>) -> usize {
    let mut names: Vec<_> = match std::fs::read_dir(a) {
        Ok(d) => d.map(|e| e.unwrap().file_name()).collect(),
        Err(e) => {
            bad.push(format!("{cmd}: {e}"));
            return 0;
        }
    };
    names.sort();
    let mut same = 0;
    for name in names {
        let x = std::fs::read(a.join(&name)).unwrap();
        match std::fs::read(b.join(&name)) {
            Ok(y) if x == y => same += 1,
            _ => bad.push(format!("{cmd}: {} differs", name.to_string_lossy())),
        }
    }
    same
}

fn first(bad: &[String]) -> String {
    match bad.first() {
        Some(b) => format!("; {} failures, first: {b}", bad.len()),
        None => String::new(),
    }
}

fn main() {
    let start = Instant::now();
    let fault_free = fault_free_runs();
    let static_faults = static_fault_runs();
    let checks: Vec<Box<dyn Fn() -> Verdict + '_>> = vec![
        Box::new(|| a1(&fault_free)),
        Box::new(|| a2(&fault_free)),
        Box::new(|| a3(&fault_free)),
        Box::new(a4),
        Box::new(a5),
        Box::new(|| a6(&static_faults)),
        Box::new(|| a7(&static_faults)),
        Box::new(a8),
        Box::new(|| a9(&fault_free)),
        Box::new(a10),
        Box::new(a11),
    ];
    let mut failed = 0;
    for check in checks {
        let v = check();
        println!("{} {}: {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of 11 passed in {:.1}s", 11 - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
