//! Latency statistics, SLO attainment, throughput search and CSV reports.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{RequestStatus, SimError, SimResult};

/// Nearest-rank percentile: element `ceil(p * n)` (1-based) of the sorted
/// samples. `None` for an empty sample set or `p` outside (0, 1].
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SloReport {
    pub attained: bool,
    /// SLO minus P95 TTFT.
    pub margin: f64,
    pub p95_ttft: Option<f64>,
    pub timeouts: usize,
}

/// Attained iff nothing timed out and P95 TTFT is at most `slo`.
pub fn slo_attained(result: &SimResult, slo: f64) -> SloReport {
    let p95 = percentile(&result.ttfts(), 0.95);
    let margin = slo - p95.unwrap_or(0.0);
    SloReport {
        attained: result.timed_out == 0 && margin >= 0.0,
        margin,
        p95_ttft: p95,
        timeouts: result.timed_out,
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("SLO not attained even at the bottom of the range ({0} rps)")]
    Unattainable(f64),
    #[error("invalid rps range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputResult {
    /// Highest rps found to attain the SLO.
    pub rps: f64,
    /// Every `(rps, attained)` probe in evaluation order.
    pub probes: Vec<(f64, bool)>,
    /// Probes below `rps` that failed.
    pub non_monotone: Vec<f64>,
}

impl ThroughputResult {
    pub fn monotone(&self) -> bool {
        self.non_monotone.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Relative bracket width at which bisection stops.
    pub tol: f64,
    /// Extra log-spaced probes below the answer to check monotonicity.
    pub audit_points: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            tol: 0.05,
            audit_points: 2,
        }
    }
}

/// Largest rps in `[lo, hi]` at which `runner` attains the SLO, by
/// geometric bisection.
pub fn throughput_under_slo<F>(
    mut runner: F,
    slo: f64,
    (lo, hi): (f64, f64),
    opts: SearchOptions,
) -> Result<ThroughputResult, MetricsError>
where
    F: FnMut(f64) -> Result<SimResult, SimError>,
{
    if !(lo > 0.0) || !(hi >= lo) {
        return Err(MetricsError::BadRange(lo, hi));
    }
    let mut probes = Vec::new();
    let mut probe = |rps: f64, probes: &mut Vec<(f64, bool)>| -> Result<bool, MetricsError> {
        let ok = slo_attained(&runner(rps)?, slo).attained;
        probes.push((rps, ok));
        Ok(ok)
    };
    if !probe(lo, &mut probes)? {
        return Err(MetricsError::Unattainable(lo));
    }
    let (mut good, mut bad) = (lo, hi);
    if hi > lo && probe(hi, &mut probes)? {
        good = hi;
    } else {
        while bad / good > 1.0 + opts.tol {
            let mid = (good * bad).sqrt();
            if probe(mid, &mut probes)? {
                good = mid;
            } else {
                bad = mid;
            }
        }
    }
    if opts.audit_points > 0 && good > lo {
        let ratio = good / lo;
        for i in 1..=opts.audit_points {
            let x = lo * ratio.powf(i as f64 / (opts.audit_points + 1) as f64);
            probe(x, &mut probes)?;
        }
    }
    let non_monotone = probes.iter().filter(|&&(x, ok)| !ok && x < good).map(|&(x, _)| x).collect();
    Ok(ThroughputResult {
        rps: good,
        probes,
        non_monotone,
    })
}

/// One labelled simulation for reporting.
#[derive(Clone, Debug)]
pub struct ReportEntry<'a> {
    pub rps: f64,
    pub result: &'a SimResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub router: String,
    pub rps: f64,
    pub requests: usize,
    pub completed: usize,
    pub timeouts: usize,
    pub in_flight: usize,
    pub p50_ttft: Option<f64>,
    pub p95_ttft: Option<f64>,
    pub p99_ttft: Option<f64>,
    pub p95_tbt: Option<f64>,
    pub max_resident_adapters: usize,
    /// Peak resident adapters for each server, `;`-separated.
    pub resident_per_server: String,
    pub migrations: usize,
    pub migration_bytes: u64,
    pub fetch_bytes: u64,
}

impl SummaryRow {
    pub fn new(rps: f64, r: &SimResult) -> Self {
        let ttft = r.ttfts();
        let tbt: Vec<f64> = r.per_request.iter().flat_map(|q| q.tbt.iter().map(|&x| f64::from(x))).collect();
        Self {
            policy: r.policy.clone(),
            router: r.router.clone(),
            rps,
            requests: r.per_request.len(),
            completed: r.completed,
            timeouts: r.timed_out,
            in_flight: r.in_flight,
            p50_ttft: percentile(&ttft, 0.50),
            p95_ttft: percentile(&ttft, 0.95),
            p99_ttft: percentile(&ttft, 0.99),
            p95_tbt: percentile(&tbt, 0.95),
            max_resident_adapters: r.max_resident(),
            resident_per_server: r
                .per_server
                .iter()
                .map(|s| s.max_resident_adapters.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            migrations: r.migrations(),
            migration_bytes: r.migration_bytes(),
            fetch_bytes: r.fetch_bytes(),
        }
    }
}

#[derive(Serialize)]
struct RequestRow<'a> {
    policy: &'a str,
    rps: f64,
    request_id: &'a str,
    adapter: &'a str,
    rank: u32,
    server: Option<usize>,
    arrival: f64,
    ttft: Option<f64>,
    queue_time: Option<f64>,
    p95_tbt: Option<f64>,
    status: &'static str,
}

#[derive(Serialize)]
struct ServerRow<'a> {
    policy: &'a str,
    rps: f64,
    server: usize,
    requests: usize,
    queue_time_p95: f64,
    prefill_time_p95: f64,
    max_resident_adapters: usize,
    final_resident_adapters: usize,
    fetch_count: u64,
    fetch_bytes: u64,
    host_loads: u64,
    busy_seconds: f64,
}

const SUMMARY_HEADER: &[&str] = &[
    "policy",
    "router",
    "rps",
    "requests",
    "completed",
    "timeouts",
    "in_flight",
    "p50_ttft",
    "p95_ttft",
    "p99_ttft",
    "p95_tbt",
    "max_resident_adapters",
    "resident_per_server",
    "migrations",
    "migration_bytes",
    "fetch_bytes",
];
const REQUEST_HEADER: &[&str] = &[
    "policy",
    "rps",
    "request_id",
    "adapter",
    "rank",
    "server",
    "arrival",
    "ttft",
    "queue_time",
    "p95_tbt",
    "status",
];
const SERVER_HEADER: &[&str] = &[
    "policy",
    "rps",
    "server",
    "requests",
    "queue_time_p95",
    "prefill_time_p95",
    "max_resident_adapters",
    "final_resident_adapters",
    "fetch_count",
    "fetch_bytes",
    "host_loads",
    "busy_seconds",
];

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>, MetricsError> {
    let file = fs::File::create(path).map_err(|source| MetricsError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|source| MetricsError::Csv {
        path: path.to_owned(),
        source,
    })?;
    Ok(w)
}

/// Writes `summary.csv`, `per_request.csv` and `per_server.csv` into
/// `out_dir`, one summary row per entry. Returns the written paths.
pub fn emit_report(entries: &[ReportEntry<'_>], out_dir: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let paths: Vec<PathBuf> = ["summary.csv", "per_request.csv", "per_server.csv"]
        .iter()
        .map(|n| out_dir.join(n))
        .collect();
    let csv_err = |path: &Path| {
        let path = path.to_owned();
        move |source| MetricsError::Csv { path, source }
    };

    let mut summary = writer(&paths[0], SUMMARY_HEADER)?;
    let mut requests = writer(&paths[1], REQUEST_HEADER)?;
    let mut servers = writer(&paths[2], SERVER_HEADER)?;
    for e in entries {
        let r = e.result;
        summary.serialize(SummaryRow::new(e.rps, r)).map_err(csv_err(&paths[0]))?;
        for q in &r.per_request {
            let tbt: Vec<f64> = q.tbt.iter().map(|&x| f64::from(x)).collect();
            requests
                .serialize(RequestRow {
                    policy: &r.policy,
                    rps: e.rps,
                    request_id: &q.request_id,
                    adapter: q.adapter.as_str(),
                    rank: q.rank,
                    server: q.server.map(|s| s.0),
                    arrival: q.arrival,
                    ttft: q.ttft,
                    queue_time: q.queue_time,
                    p95_tbt: percentile(&tbt, 0.95),
                    status: match q.status {
                        RequestStatus::Completed => "completed",
                        RequestStatus::TimedOut => "timed_out",
                        RequestStatus::InFlight => "in_flight",
                    },
                })
                .map_err(csv_err(&paths[1]))?;
        }
        for (i, s) in r.per_server.iter().enumerate() {
            servers
                .serialize(ServerRow {
                    policy: &r.policy,
                    rps: e.rps,
                    server: i,
                    requests: s.requests,
                    queue_time_p95: s.queue_time_p95,
                    prefill_time_p95: s.prefill_time_p95,
                    max_resident_adapters: s.max_resident_adapters,
                    final_resident_adapters: s.final_resident_adapters,
                    fetch_count: s.fetch_count,
                    fetch_bytes: s.fetch_bytes,
                    host_loads: s.host_loads,
                    busy_seconds: s.busy_seconds,
                })
                .map_err(csv_err(&paths[2]))?;
        }
    }
    for (w, p) in [(summary, &paths[0]), (requests, &paths[1]), (servers, &paths[2])] {
        w.into_inner()
            .map_err(|e| MetricsError::Io {
                path: p.clone(),
                source: e.into_error(),
            })?
            .sync_all()
            .map_err(|source| MetricsError::Io {
                path: p.clone(),
                source,
            })?;
    }
    Ok(paths)
}
