use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use rankserve::config::{load_operating_points, write_operating_points, ClusterConfig};
use rankserve::domain::{Adapter, OperatingPointTable, Rank, Request};
use rankserve::metrics::{emit_report, throughput_under_slo, ReportEntry, SearchOptions, SummaryRow};
use rankserve::placement::PlacementPolicy;
use rankserve::routing::RouterKind;
use rankserve::sim::{profile_operating_points, run, ProfileConfig, SimConfig, SimResult};
use rankserve::traces::{
    generate_trace, load_adapters, load_trace, scale_trace_rps, write_adapters, write_trace, AdapterCounts,
    ArrivalProcess, Lengths, Popularity, TraceConfig, WithinRank, DEFAULT_RANKS,
};

/// Rank-aware LoRA adapter placement experiments on a simulated cluster.
#[derive(Parser, Debug)]
#[command(name = "rankserve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic request trace and its adapter inventory.
    GenTrace(GenTraceArgs),
    /// Profile per-rank operating points (max tokens/s under the SLO).
    Profile(ProfileArgs),
    /// Replay a trace under one or more placement policies and write reports.
    Run(RunArgs),
    /// Find throughput under the SLO for each policy by bisection over RPS.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArrivalArg {
    Poisson,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PopularityArg {
    Uniform,
    #[value(name = "shifting_skew", alias = "shifting-skew")]
    ShiftingSkew,
    Exponential,
    #[value(name = "power_law", alias = "power-law")]
    PowerLaw,
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    /// Mean request rate.
    #[arg(long)]
    rps: f64,
    /// Trace length in seconds.
    #[arg(long, default_value_t = 600.0)]
    duration: f64,
    #[arg(long, value_enum, default_value = "poisson")]
    arrival: ArrivalArg,
    /// How traffic is split across ranks.
    #[arg(long, value_enum, default_value = "uniform")]
    popularity: PopularityArg,
    /// Exponent for `--popularity power_law`.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Total number of adapters.
    #[arg(long, default_value_t = 25)]
    adapters: usize,
    /// Power-law exponent of adapter counts per rank (0 splits evenly).
    #[arg(long, default_value_t = 0.0)]
    count_skew: f64,
    /// Power-law exponent for picking an adapter within a rank (uniform if unset).
    #[arg(long)]
    within_rank_alpha: Option<f64>,
    /// Comma-separated adapter ranks.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RANKS)]
    ranks: Vec<Rank>,
    #[arg(long, default_value_t = 512)]
    prompt_len: u32,
    #[arg(long, default_value_t = 128)]
    output_len: u32,
    #[arg(long, default_value = "llama-7b")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace file (.csv or .jsonl).
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
    /// Adapter inventory; defaults to adapters.csv next to the trace.
    #[arg(long)]
    adapters_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ClusterArgs {
    /// TOML cluster config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    servers: Option<usize>,
    /// Tensor-parallel degree.
    #[arg(long)]
    tp: Option<u32>,
    /// P95 TTFT target in seconds.
    #[arg(long)]
    slo: Option<f64>,
    /// Rebalance period in seconds.
    #[arg(long)]
    rebalance_window: Option<f64>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    /// Comma-separated ranks to profile.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RANKS)]
    ranks: Vec<Rank>,
    /// Seconds of synthetic load per probe.
    #[arg(long, default_value_t = 600.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV of rank,max_tps.
    #[arg(long, default_value = "operating_points.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    /// Request trace (.csv or .jsonl).
    #[arg(long)]
    trace: PathBuf,
    /// Adapter inventory CSV; overrides adapters from the config.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Operating points CSV; profiled on the fly when neither this nor the config has them.
    #[arg(long)]
    ops: Option<PathBuf>,
    #[arg(long, default_value = "table")]
    router: RouterKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    replay: ReplayArgs,
    /// Comma-separated placement policies.
    #[arg(long, value_delimiter = ',', default_value = "loraserve")]
    placement: Vec<PlacementPolicy>,
    /// Rescale the trace to this request rate.
    #[arg(long)]
    rps: Option<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    replay: ReplayArgs,
    /// Comma-separated placement policies.
    #[arg(long, value_delimiter = ',', default_value = "loraserve,random,contiguous,replicate")]
    placement: Vec<PlacementPolicy>,
    #[arg(long, default_value_t = 0.5)]
    rps_min: f64,
    #[arg(long, default_value_t = 100.0)]
    rps_max: f64,
    /// Relative bracket width at which bisection stops.
    #[arg(long, default_value_t = 0.05)]
    tol: f64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::GenTrace(a) => cmd_gen_trace(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain joined by `: `, skipping causes the previous message
/// already ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn cmd_gen_trace(a: GenTraceArgs) -> Result<(), Failure> {
    let popularity = match a.popularity {
        PopularityArg::Uniform => Popularity::Uniform,
        PopularityArg::ShiftingSkew => Popularity::ShiftingSkew,
        PopularityArg::Exponential => Popularity::Exponential,
        PopularityArg::PowerLaw => Popularity::PowerLaw { alpha: a.alpha },
    };
    let cfg = TraceConfig {
        duration: a.duration,
        rps: a.rps,
        arrival: match a.arrival {
            ArrivalArg::Poisson => ArrivalProcess::Poisson,
            ArrivalArg::Uniform => ArrivalProcess::Uniform,
        },
        popularity,
        within_rank: a
            .within_rank_alpha
            .map_or(WithinRank::Uniform, |alpha| WithinRank::PowerLaw { alpha }),
        ranks: a.ranks,
        adapters: AdapterCounts::Total {
            total: a.adapters,
            count_skew: a.count_skew,
        },
        lengths: Lengths::Fixed {
            prompt: a.prompt_len,
            output: a.output_len,
        },
        model: a.model.clone(),
        seed: a.seed,
        ..TraceConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let g = generate_trace(&cfg).context("generating trace")?;
    write_trace(&a.out, &g.requests, &a.model).context("writing trace")?;
    let adapters_out = a.adapters_out.unwrap_or_else(|| sibling(&a.out, "adapters.csv"));
    write_adapters(&adapters_out, &g.adapters).context("writing adapters")?;
    println!(
        "wrote {} requests to {} and {} adapters to {}",
        g.requests.len(),
        a.out.display(),
        g.adapters.len(),
        adapters_out.display()
    );
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(name),
        _ => PathBuf::from(name),
    }
}

fn load_cluster(args: &ClusterArgs) -> Result<ClusterConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => ClusterConfig::load(p).context("loading config")?,
        None => ClusterConfig::default(),
    };
    if let Some(v) = args.servers {
        cfg.servers = v;
    }
    if let Some(v) = args.tp {
        cfg.tp = v;
    }
    if let Some(v) = args.slo {
        cfg.slo = v;
    }
    if let Some(v) = args.rebalance_window {
        cfg.sim.rebalance_window = v;
    }
    if args.servers == Some(0) || args.tp == Some(0) || args.slo.is_some_and(|s| !(s > 0.0)) {
        return Err(Failure::Usage("--servers, --tp and --slo must be positive".into()));
    }
    if args.rebalance_window.is_some_and(|w| !(w > 0.0)) {
        return Err(Failure::Usage("--rebalance-window must be positive".into()));
    }
    cfg.validate().context("invalid cluster config")?;
    Ok(cfg)
}

fn cmd_profile(a: ProfileArgs) -> Result<(), Failure> {
    if a.ranks.is_empty() {
        return Err(Failure::Usage("--ranks must list at least one rank".into()));
    }
    if !(a.duration > 0.0) {
        return Err(Failure::Usage("--duration must be positive".into()));
    }
    let cfg = load_cluster(&a.cluster)?;
    let table = profile(&cfg, &a.ranks, a.duration, a.seed)?;
    write_operating_points(&a.out, &table).context("writing operating points")?;
    println!("rank,max_tps");
    for (rank, tps) in table.as_map() {
        println!("{rank},{tps:.1}");
    }
    Ok(())
}

fn profile(cfg: &ClusterConfig, ranks: &[Rank], duration: f64, seed: u64) -> Result<OperatingPointTable> {
    let pc = ProfileConfig {
        duration,
        seed,
        ..ProfileConfig::default()
    };
    Ok(profile_operating_points(&pc, &cfg.cost_params()?, cfg.slo, ranks)?)
}

struct Workload {
    cfg: ClusterConfig,
    sim: SimConfig,
    adapters: Vec<Adapter>,
    trace: Vec<Request>,
    ops: OperatingPointTable,
}

fn load_workload(r: &ReplayArgs) -> Result<Workload, Failure> {
    let cfg = load_cluster(&r.cluster)?;
    let trace = load_trace(&r.trace).context("loading trace")?;
    let adapters = match &r.adapters {
        Some(p) => load_adapters(p).context("loading adapters")?,
        None if !cfg.adapters.is_empty() => cfg.adapters.clone(),
        None => {
            let guess = sibling(&r.trace, "adapters.csv");
            if !guess.exists() {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "no adapter inventory: pass --adapters or list adapters in the config"
                )));
            }
            load_adapters(&guess).with_context(|| format!("loading {}", guess.display()))?
        }
    };
    let ops = match (&r.ops, cfg.operating_point_table().context("operating points")?) {
        (Some(p), _) => load_operating_points(p).context("loading operating points")?,
        (None, Some(t)) => t,
        (None, None) => {
            let mut ranks: Vec<Rank> = adapters.iter().map(|a| a.rank).collect();
            ranks.sort_unstable();
            ranks.dedup();
            eprintln!("profiling operating points for ranks {ranks:?}");
            profile(&cfg, &ranks, ProfileConfig::default().duration, 0)?
        }
    };
    let sim = cfg.sim_config().context("building simulator config")?;
    Ok(Workload {
        cfg,
        sim,
        adapters,
        trace,
        ops,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    if a.rps.is_some_and(|r| !(r > 0.0)) {
        return Err(Failure::Usage("--rps must be positive".into()));
    }
    let w = load_workload(&a.replay)?;
    let trace = match a.rps {
        Some(rps) => scale_trace_rps(&w.trace, rps).context("rescaling trace")?,
        None => w.trace.clone(),
    };
    let offered = offered_rps(&trace);
    let router = a.replay.router;
    let seed = a.replay.seed;
    let results: Vec<SimResult> = a
        .placement
        .par_iter()
        .map(|&p| run(&trace, &w.adapters, &w.ops, p, router, &w.sim, seed).with_context(|| format!("running {p}")))
        .collect::<Result<_>>()?;
    let entries: Vec<ReportEntry<'_>> = results.iter().map(|result| ReportEntry { rps: offered, result }).collect();
    let files = emit_report(&entries, &a.replay.out).context("writing reports")?;
    println!("policy,router,requests,completed,timeouts,p50_ttft,p95_ttft,max_resident,migrations");
    for r in &results {
        let row = SummaryRow::new(offered, r);
        println!(
            "{},{},{},{},{},{},{},{},{}",
            row.policy,
            row.router,
            row.requests,
            row.completed,
            row.timeouts,
            fmt_opt(row.p50_ttft),
            fmt_opt(row.p95_ttft),
            row.max_resident_adapters,
            row.migrations
        );
    }
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn offered_rps(trace: &[Request]) -> f64 {
    match (trace.first(), trace.last()) {
        (Some(f), Some(l)) if l.arrival_time > f.arrival_time => (trace.len() - 1) as f64 / (l.arrival_time - f.arrival_time),
        _ => 0.0,
    }
}

struct SweepRow {
    policy: PlacementPolicy,
    rps: f64,
    probes: usize,
    monotone: bool,
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    if !(a.rps_min > 0.0) || !a.rps_max.is_finite() {
        return Err(Failure::Usage("--rps-min and --rps-max must be positive and finite".into()));
    }
    if a.rps_min > a.rps_max {
        return Err(Failure::Usage(format!(
            "--rps-min ({}) must not exceed --rps-max ({})",
            a.rps_min, a.rps_max
        )));
    }
    if !(a.tol > 0.0) {
        return Err(Failure::Usage("--tol must be positive".into()));
    }
    let w = load_workload(&a.replay)?;
    if w.trace.len() < 2 {
        return Err(Failure::Runtime(anyhow::anyhow!("sweeping needs a trace with at least two requests")));
    }
    let router = a.replay.router;
    let seed = a.replay.seed;
    let opts = SearchOptions {
        tol: a.tol,
        ..SearchOptions::default()
    };
    let rows: Vec<SweepRow> = a
        .placement
        .par_iter()
        .map(|&policy| {
            let runner = |rps: f64| {
                let t = scale_trace_rps(&w.trace, rps).expect("rps validated above");
                run(&t, &w.adapters, &w.ops, policy, router, &w.sim, seed)
            };
            match throughput_under_slo(runner, w.cfg.slo, (a.rps_min, a.rps_max), opts) {
                Ok(t) => Ok(SweepRow {
                    policy,
                    rps: t.rps,
                    probes: t.probes.len(),
                    monotone: t.monotone(),
                }),
                Err(rankserve::metrics::MetricsError::Unattainable(_)) => Ok(SweepRow {
                    policy,
                    rps: 0.0,
                    probes: 1,
                    monotone: true,
                }),
                Err(e) => Err(anyhow::Error::new(e).context(format!("sweeping {policy}"))),
            }
        })
        .collect::<Result<_>>()?;
    let reference = rows.iter().find(|r| r.policy == PlacementPolicy::RankAware).map(|r| r.rps);
    std::fs::create_dir_all(&a.replay.out).with_context(|| format!("creating {}", a.replay.out.display()))?;
    let path = a.replay.out.join("sweep.csv");
    let mut text = String::from("policy,throughput_rps,probes,monotone,loraserve_ratio\n");
    for r in &rows {
        let ratio = match reference {
            Some(x) if r.rps > 0.0 => format!("{:.3}", x / r.rps),
            Some(_) => "inf".into(),
            None => "-".into(),
        };
        text.push_str(&format!("{},{:.3},{},{},{ratio}\n", r.policy, r.rps, r.probes, r.monotone));
    }
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    if rows.iter().any(|r| r.rps == 0.0) {
        eprintln!("note: throughput 0 means the SLO was missed even at --rps-min");
    }
    if reference.is_none() {
        eprintln!("note: loraserve not in --placement, ratio column left empty");
    }
    Ok(())
}
