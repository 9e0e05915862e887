//! `kvprune` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 soundness
//! verification failure, 3 I/O or trace format error. Errors are reported
//! on stderr as `{"error":{"kind":..,"message":..}}`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use kvprune::engine::OrderPolicy;
use kvprune::io::{generate, load_config, read_trace, write_trace, RunConfig, SyntheticSpec};
use kvprune::margin::build_margins;
use kvprune::quant::Chunking;
use kvprune::report::{run_experiment, PrunedToken, RunMetrics, RunMode, SoundnessReport};
use kvprune::sched::write_event_trace;
use kvprune::{Error, Instance};

#[derive(Parser)]
#[command(
    name = "kvprune",
    version,
    about = "Progressive KV-cache pruning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one instance and emit its metrics as JSON.
    Run(RunArgs),
    /// Generate a synthetic trace file.
    Gen(GenArgs),
    /// Check every pruned token against the exact softmax.
    Verify(VerifyArgs),
    /// Run a grid of thresholds and seeds in parallel.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Input {
    /// TPKV trace file.
    #[arg(long, conflicts_with = "synthetic")]
    trace: Option<PathBuf>,
    /// Synthetic workload, e.g. `peaked:k=8,gap=16,n=2048,d=64,seed=1`.
    #[arg(long)]
    synthetic: Option<String>,
}

#[derive(Args, Clone)]
struct Settings {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pruning threshold in [0, 1); 0 disables pruning.
    #[arg(long)]
    thr: Option<f64>,
    /// Chunks per key element.
    #[arg(long)]
    chunks: Option<u32>,
    /// Bits per chunk; precision is chunks x chunk bits.
    #[arg(long)]
    chunk_bits: Option<u32>,
    /// `locality` or `sequential`.
    #[arg(long)]
    order: Option<String>,
    /// Memory model overrides: `latency=L,bw=B,channels=C,inflight=I`
    /// (bw in bytes per cycle per channel).
    #[arg(long)]
    mem: Option<String>,
    /// Processing lanes.
    #[arg(long)]
    lanes: Option<usize>,
    /// Scoreboard entries per lane.
    #[arg(long)]
    scoreboard: Option<usize>,
    /// Uniform extra arrival delay of up to this many cycles.
    #[arg(long)]
    jitter: Option<u64>,
    /// Reuse the step-0 denominator for the output instead of rebuilding it.
    #[arg(long)]
    no_renormalize: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    settings: Settings,
    /// `functional`, `ooo`, `blocking` or `all`.
    #[arg(long, default_value = "all")]
    mode: String,
    /// Check soundness against the oracle; exit 2 on failure.
    #[arg(long)]
    verify: bool,
    /// Write metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the scheduler event trace (CSV) of the primary mode here.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    synthetic: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    settings: Settings,
    #[arg(long, default_value = "all")]
    mode: String,
    /// Number of consecutive seeds to check, starting at the workload's seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Understate the upper margins to exercise the failure path.
    #[arg(long, hide = true)]
    inject_margin_fault: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    settings: Settings,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', required = true)]
    thr_list: Vec<f64>,
    #[arg(long, default_value = "all")]
    mode: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Lib(Error),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn report_error(kind: &str, message: &str) {
    let doc = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{doc}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(2),
        Err(Failure::Usage(msg)) => {
            report_error("usage", &msg);
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            report_error(e.kind(), &e.to_string());
            match e {
                Error::Io(_) | Error::Format(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn build_config(s: &Settings) -> CliResult<RunConfig> {
    let mut cfg = match &s.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(thr) = s.thr {
        cfg.prune.thr = thr;
    }
    if s.chunks.is_some() || s.chunk_bits.is_some() {
        let old = cfg.prune.chunking;
        let bits = s.chunk_bits.unwrap_or(old.chunk_bits());
        let chunks = s.chunks.unwrap_or(old.chunks() as u32);
        cfg.prune.chunking = Chunking::new(chunks * bits, bits)?;
    }
    if let Some(order) = &s.order {
        cfg.prune.order = order.parse::<OrderPolicy>()?;
    }
    if let Some(mem) = &s.mem {
        apply_mem(&mut cfg, mem)?;
    }
    if let Some(lanes) = s.lanes {
        cfg.sim.lanes = lanes;
    }
    if let Some(sb) = s.scoreboard {
        cfg.sim.scoreboard_capacity = sb;
    }
    if let Some(j) = s.jitter {
        cfg.sim.jitter_cycles = j;
    }
    if s.no_renormalize {
        cfg.prune.renormalize_output = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_mem(cfg: &mut RunConfig, spec: &str) -> CliResult<()> {
    for kv in spec.split(',').filter(|p| !p.is_empty()) {
        let (key, val) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--mem expects key=value, got `{kv}`")))?;
        let bad = |e: &dyn std::fmt::Display| Failure::Usage(format!("--mem {key}: {e}"));
        let m = &mut cfg.memory;
        match key {
            "latency" => m.latency_cycles = val.parse().map_err(|e| bad(&e))?,
            "bw" => m.bytes_per_cycle = val.parse().map_err(|e| bad(&e))?,
            "channels" => m.channels = val.parse().map_err(|e| bad(&e))?,
            "inflight" => m.max_inflight = val.parse().map_err(|e| bad(&e))?,
            other => return Err(Failure::Usage(format!("unknown --mem key `{other}`"))),
        }
    }
    Ok(())
}

/// A workload that can be materialized for any seed.
enum Source {
    Trace(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Source {
    fn resolve(input: &Input, cfg: &RunConfig) -> CliResult<Self> {
        match (&input.trace, &input.synthetic, &cfg.synthetic) {
            (Some(p), _, _) => Ok(Source::Trace(p.clone())),
            (None, Some(s), _) => Ok(Source::Synthetic(s.parse()?)),
            (None, None, Some(s)) => Ok(Source::Synthetic(s.clone())),
            _ => Err(Failure::Usage(
                "one of --trace or --synthetic is required".into(),
            )),
        }
    }

    /// Seeds to iterate; a trace file has exactly one.
    fn seeds(&self, count: u64) -> CliResult<Vec<Option<u64>>> {
        match self {
            Source::Trace(_) if count > 1 => {
                Err(Failure::Usage("--seeds needs a synthetic workload".into()))
            }
            Source::Trace(_) => Ok(vec![None]),
            Source::Synthetic(s) => Ok((0..count).map(|i| Some(s.seed.wrapping_add(i))).collect()),
        }
    }

    fn instance(&self, seed: Option<u64>, chunking: Chunking) -> CliResult<Instance> {
        let trace = match (self, seed) {
            (Source::Trace(p), _) => read_trace(p)?,
            (Source::Synthetic(s), Some(seed)) => generate(&s.with_seed(seed))?,
            (Source::Synthetic(s), None) => generate(s)?,
        };
        Ok(Instance::from_trace(&trace, chunking)?)
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn parse_mode(s: &str) -> CliResult<RunMode> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    let cfg = build_config(&a.settings)?;
    let mode = parse_mode(&a.mode)?;
    let source = Source::resolve(&a.input, &cfg)?;
    let inst = source.instance(None, cfg.prune.chunking)?;
    let report = run_experiment(&inst, &cfg, mode, a.verify, None)?;
    emit(&report.metrics, a.out.as_deref())?;
    if let Some(path) = &a.events {
        let sim = report
            .ooo
            .as_ref()
            .or(report.blocking.as_ref())
            .ok_or_else(|| Failure::Usage("--events needs the ooo or blocking mode".into()))?;
        let mut w = BufWriter::new(File::create(path)?);
        write_event_trace(&sim.events, &mut w)?;
        w.flush()?;
    }
    if !report.metrics.verified() {
        list_violations(None, report.metrics.verification.as_deref().unwrap_or(&[]));
        return Err(Failure::Verification);
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let spec: SyntheticSpec = a.synthetic.parse()?;
    write_trace(&generate(&spec)?, &a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct SeedVerification {
    seed: Option<u64>,
    n_tokens: usize,
    reports: Vec<SoundnessReport>,
}

#[derive(Serialize)]
struct VerifyReport {
    pass: bool,
    thr: f64,
    runs: usize,
    tokens_pruned: usize,
    violations: usize,
    failures: Vec<SeedVerification>,
}

fn cmd_verify(a: VerifyArgs) -> CliResult<()> {
    let cfg = build_config(&a.settings)?;
    let mode = parse_mode(&a.mode)?;
    let source = Source::resolve(&a.input, &cfg)?;
    let seeds = source.seeds(a.seeds)?;
    let runs: Vec<SeedVerification> = seeds
        .par_iter()
        .map(|&seed| {
            let inst = source.instance(seed, cfg.prune.chunking)?;
            let margins = a.inject_margin_fault.then(|| {
                let mut m = build_margins(&inst.q, cfg.prune.chunking, inst.key_scale());
                m.max = m.min.clone();
                m
            });
            let report = run_experiment(&inst, &cfg, mode, true, margins)?;
            Ok(SeedVerification {
                seed,
                n_tokens: inst.n_tokens(),
                reports: report.metrics.verification.unwrap_or_default(),
            })
        })
        .collect::<CliResult<_>>()?;

    let tokens_pruned = runs
        .iter()
        .flat_map(|r| &r.reports)
        .map(|r| r.pruned.len())
        .sum();
    let violations = runs
        .iter()
        .flat_map(|r| &r.reports)
        .map(|r| r.violations.len())
        .sum();
    let failures: Vec<SeedVerification> = runs
        .iter()
        .filter(|r| r.reports.iter().any(|x| !x.pass))
        .map(|r| SeedVerification {
            seed: r.seed,
            n_tokens: r.n_tokens,
            reports: r.reports.iter().filter(|x| !x.pass).cloned().collect(),
        })
        .collect();
    let pass = failures.is_empty();
    for f in &failures {
        list_violations(f.seed, &f.reports);
    }
    emit(
        &VerifyReport {
            pass,
            thr: cfg.prune.thr,
            runs: runs.len(),
            tokens_pruned,
            violations,
            failures,
        },
        a.out.as_deref(),
    )?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn list_violations(seed: Option<u64>, reports: &[SoundnessReport]) {
    for r in reports.iter().filter(|r| !r.pass) {
        let tokens: Vec<String> = r.violations.iter().map(format_token).collect();
        let at = seed.map(|s| format!(" seed {s}")).unwrap_or_default();
        eprintln!(
            "FAIL{at} [{}]: {} pruned token(s) at or above thr {}: {}",
            r.mode,
            r.violations.len(),
            r.thr,
            tokens.join(", ")
        );
    }
}

fn format_token(t: &PrunedToken) -> String {
    format!(
        "{} (chunk {}, p={:.3e})",
        t.index, t.level, t.true_probability
    )
}

#[derive(Serialize)]
struct SweepPoint {
    thr: f64,
    seed: Option<u64>,
    metrics: RunMetrics,
}

fn cmd_sweep(a: SweepArgs) -> CliResult<()> {
    let base = build_config(&a.settings)?;
    let mode = parse_mode(&a.mode)?;
    let source = Source::resolve(&a.input, &base)?;
    let seeds = source.seeds(a.seeds)?;
    let grid: Vec<(f64, Option<u64>)> = a
        .thr_list
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let points: Vec<SweepPoint> = grid
        .par_iter()
        .map(|&(thr, seed)| {
            let mut cfg = base.clone();
            cfg.prune.thr = thr;
            cfg.validate()?;
            let inst = source.instance(seed, cfg.prune.chunking)?;
            let metrics = run_experiment(&inst, &cfg, mode, false, None)?.metrics;
            Ok(SweepPoint { thr, seed, metrics })
        })
        .collect::<CliResult<_>>()?;
    emit(&points, a.out.as_deref())
}
