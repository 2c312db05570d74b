use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ftgcs::analysis::{build_report, Report};
use ftgcs::config::{check_names, Config};
use ftgcs::engine::SourceMode;
use ftgcs::experiment;
use ftgcs::io;

#[derive(Parser)]
#[command(name = "ftgcs", version, about = "Simulate and check fault-tolerant gradient clock synchronization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, env = "FTGCS_OUT_DIR", default_value = "out")]
    out: PathBuf,
    /// Run even if the parameters violate the validated regime.
    #[arg(long, global = true)]
    force: bool,
    /// Comma-separated checks to run instead of the defaults.
    #[arg(long, global = true, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    /// Worker threads for sweeps and Monte-Carlo runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration and write its trace and report.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-check a stored trace directory.
    Verify {
        /// Directory holding trace.csv (and snapshots.csv, config.toml).
        dir: PathBuf,
        /// Configuration; defaults to DIR/config.toml.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// One run per axis point and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Corrupted starts against clean references.
    Stabilize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Random fault placements.
    FaultsMc {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Exit status 1: the run finished but some check failed.
struct ChecksFailed(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(ChecksFailed(msg))) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Option<ChecksFailed>> {
    if let Some(checks) = &cli.checks {
        check_names(checks).map_err(anyhow::Error::msg)?;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match &cli.command {
        Command::Run { config } => run(cli, config),
        Command::Verify { dir, config } => verify(cli, dir, config.as_deref()),
        Command::Sweep { config } => sweep(cli, config),
        Command::Stabilize { config } => stabilize(cli, config),
        Command::FaultsMc { config } => faults_mc(cli, config),
    }
}

fn load(cli: &Cli, path: &Path) -> Result<Config> {
    let cfg = Config::from_path(path).with_context(|| path.display().to_string())?;
    for point in cfg.axis_points() {
        let c = cfg.with_override(&point, cfg.run.seed).with_context(|| path.display().to_string())?;
        c.check_regime(cli.force).with_context(|| path.display().to_string())?;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("cannot create {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn summarize(report: &Report) -> Option<ChecksFailed> {
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6e}"));
    println!(
        "max layer skew {} (bound {:.6e}), overall {}",
        fmt(report.max_local_skew),
        report.skew_bound,
        fmt(report.overall_skew)
    );
    for c in &report.checks {
        println!("{:<12} {} ({} checked, {} violations)", c.name, if c.passed { "ok" } else { "FAIL" }, c.checked, c.violations);
        for ex in c.examples.iter().take(3) {
            println!("    {ex}");
        }
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    (!failed.is_empty()).then(|| ChecksFailed(failed.join(", ")))
}

fn run(cli: &Cli, path: &Path) -> Result<Option<ChecksFailed>> {
    let cfg = load(cli, path)?;
    let out = out_dir(cli)?;
    let (trace, report) = experiment::run_and_report(&cfg, cli.checks.as_deref())?;
    std::fs::write(out.join("config.toml"), cfg.text())?;
    io::write_trace(&out.join("trace.csv"), &trace)?;
    io::write_snapshots(&out.join("snapshots.csv"), &trace)?;
    if !trace.faulty.is_empty() {
        io::write_faulty(&out.join("faulty.csv"), &trace)?;
    }
    if cfg.run.record_events {
        io::write_events(&out.join("events.csv"), &trace)?;
    }
    io::write_report(&out.join("report.json"), &report)?;
    Ok(summarize(&report))
}

fn verify(cli: &Cli, dir: &Path, config: Option<&Path>) -> Result<Option<ChecksFailed>> {
    let path = config.map_or_else(|| dir.join("config.toml"), Path::to_path_buf);
    let cfg = Config::from_path(&path).with_context(|| path.display().to_string())?;
    let scenario = cfg.run.build().with_context(|| path.display().to_string())?;
    let snapshots = dir.join("snapshots.csv");
    let trace = io::read_trace(
        &scenario.graph,
        &dir.join("trace.csv"),
        snapshots.exists().then_some(snapshots.as_path()),
        scenario.faults.set(),
        scenario.pulses,
    )?;
    let chain = cfg.run.source == SourceMode::Chain;
    let report = build_report(&scenario.graph, &scenario.params, &trace, cli.checks.as_deref(), chain);
    let out = out_dir(cli)?;
    io::write_report(&out.join("report.json"), &report)?;
    Ok(summarize(&report))
}

fn sweep(cli: &Cli, path: &Path) -> Result<Option<ChecksFailed>> {
    let cfg = load(cli, path)?;
    let out = out_dir(cli)?;
    let rows = experiment::sweep(&cfg, cli.checks.as_deref())?;
    let summary = experiment::sweep_summary(&rows);
    experiment::write_sweep(&out.join("sweep.csv"), &rows)?;
    experiment::write_summary(&out.join("sweep_summary.csv"), &summary)?;
    for s in &summary {
        println!(
            "{:<30} {} rows, {} passed, max layer skew {}",
            if s.point.is_empty() { "(base)" } else { &s.point },
            s.count,
            s.passed,
            s.max.map_or("-".into(), |v| format!("{v:.6e}"))
        );
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    Ok((failed > 0).then(|| ChecksFailed(format!("{failed} of {} sweep rows", rows.len()))))
}

fn stabilize(cli: &Cli, path: &Path) -> Result<Option<ChecksFailed>> {
    let cfg = load(cli, path)?;
    let out = out_dir(cli)?;
    let rows = experiment::stabilize(&cfg)?;
    experiment::write_stabilize(&out.join("stabilize.csv"), &rows)?;
    let worst = rows.iter().filter_map(|r| r.ratio).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    println!("{} trials, worst pulse/sqrt(n) {}", rows.len(), worst.map_or("-".into(), |v| format!("{v:.4}")));
    let stuck = rows.iter().filter(|r| r.corrupted.is_none()).count();
    Ok((stuck > 0).then(|| ChecksFailed(format!("{stuck} trials did not stabilize"))))
}

fn faults_mc(cli: &Cli, path: &Path) -> Result<Option<ChecksFailed>> {
    let cfg = load(cli, path)?;
    let out = out_dir(cli)?;
    let rows = experiment::faults_mc(&cfg)?;
    let summary = experiment::faults_summary(&rows);
    experiment::write_faults(&out.join("faults_mc.csv"), &rows)?;
    experiment::write_fault_summary(&out.join("faults_mc_summary.csv"), &summary)?;
    for s in &summary {
        println!(
            "{} trials, {} rejected (acceptance {:.3}), envelope violations {}, max layer skew {}",
            s.trials,
            s.rejected,
            s.acceptance_rate,
            s.envelope_violations,
            s.skew.max.map_or("-".into(), |v| format!("{v:.6e}"))
        );
    }
    let bad = rows.iter().filter(|r| r.constraint_violations == 0 && r.envelope_violations > 0).count();
    Ok((bad > 0).then(|| ChecksFailed(format!("{bad} admissible trials with envelope violations"))))
}
