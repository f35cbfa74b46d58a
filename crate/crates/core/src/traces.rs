//! Synthetic trace generation, trace file I/O and rate rescaling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Adapter, AdapterId, Rank, Request};

pub const DEFAULT_RANKS: [Rank; 5] = [8, 16, 32, 64, 128];
/// Adapter weight bytes per unit of rank.
pub const BYTES_PER_RANK: u64 = 2 * 1024 * 1024;
pub const DEFAULT_MODEL: &str = "llama-7b";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: missing field {field}")]
    MissingField { line: u64, field: &'static str },
    #[error("line {line}: bad value for {field}: {value:?}")]
    BadValue { line: u64, field: &'static str, value: String },
    #[error("line {line}: negative timestamp {value}")]
    NegativeTimestamp { line: u64, value: f64 },
    #[error("line {line}: duplicate request_id {id:?}")]
    Duplicate { line: u64, id: String },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("trace needs at least two requests with distinct timestamps to rescale")]
    ZeroDuration,
    #[error("target rps must be positive, got {0}")]
    BadRate(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Evenly spaced at exactly the target rate.
    Uniform,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Popularity {
    Uniform,
    /// Highest rank starts with half the traffic and hands it linearly to the
    /// lowest rank by the end; other ranks keep an even share of the rest.
    ShiftingSkew,
    /// Share of the i-th smallest rank proportional to exp(-i).
    Exponential,
    /// Share of the i-th smallest rank proportional to (i+1)^-alpha.
    PowerLaw { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WithinRank {
    Uniform,
    PowerLaw { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterCounts {
    PerRank { count: usize },
    /// `total` adapters split across ranks by a power law with `count_skew`.
    Total { total: usize, count_skew: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Lengths {
    Fixed { prompt: u32, output: u32 },
    LogNormal {
        prompt_mu: f64,
        prompt_sigma: f64,
        output_mu: f64,
        output_sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub duration: f64,
    pub rps: f64,
    pub arrival: ArrivalProcess,
    pub popularity: Popularity,
    pub within_rank: WithinRank,
    pub ranks: Vec<Rank>,
    pub adapters: AdapterCounts,
    pub lengths: Lengths,
    /// Sampled lengths are clamped to these.
    pub max_prompt: u32,
    pub max_output: u32,
    pub model: String,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            duration: 600.0,
            rps: 1.0,
            arrival: ArrivalProcess::Poisson,
            popularity: Popularity::Uniform,
            within_rank: WithinRank::Uniform,
            ranks: DEFAULT_RANKS.to_vec(),
            adapters: AdapterCounts::PerRank { count: 5 },
            lengths: Lengths::Fixed { prompt: 512, output: 128 },
            max_prompt: 8192,
            max_output: 2048,
            model: DEFAULT_MODEL.to_owned(),
            seed: 0,
        }
    }
}

impl TraceConfig {
    /// Poisson arrivals, exponential rank popularity, power-law adapter
    /// counts and power-law choice within a rank.
    pub fn production(total_adapters: usize, rps: f64, duration: f64, seed: u64) -> Self {
        Self {
            duration,
            rps,
            popularity: Popularity::Exponential,
            within_rank: WithinRank::PowerLaw { alpha: 1.0 },
            adapters: AdapterCounts::Total {
                total: total_adapters,
                count_skew: 1.0,
            },
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidConfig(m));
        if !(self.rps > 0.0) || !self.rps.is_finite() {
            return bad(format!("rps must be positive, got {}", self.rps));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return bad("ranks must be a non-empty list of positive integers".into());
        }
        if self.ranks.iter().collect::<BTreeSet<_>>().len() != self.ranks.len() {
            return bad("ranks must be distinct".into());
        }
        match self.adapters {
            AdapterCounts::PerRank { count: 0 } => return bad("need at least one adapter per rank".into()),
            AdapterCounts::Total { total, count_skew } => {
                if total < self.ranks.len() {
                    return bad(format!("{total} adapters cannot cover {} ranks", self.ranks.len()));
                }
                if !(count_skew >= 0.0) {
                    return bad(format!("count skew must be >= 0, got {count_skew}"));
                }
            }
            _ => {}
        }
        for alpha in [
            match self.popularity {
                Popularity::PowerLaw { alpha } => Some(alpha),
                _ => None,
            },
            match self.within_rank {
                WithinRank::PowerLaw { alpha } => Some(alpha),
                _ => None,
            },
        ]
        .into_iter()
        .flatten()
        {
            if !(alpha > 0.0) {
                return bad(format!("power-law alpha must be > 0, got {alpha}"));
            }
        }
        if let Lengths::Fixed { prompt, output } = self.lengths {
            if prompt == 0 || output == 0 {
                return bad("fixed lengths must be >= 1".into());
            }
        }
        if self.max_prompt == 0 || self.max_output == 0 {
            return bad("length caps must be >= 1".into());
        }
        Ok(())
    }

    fn sorted_ranks(&self) -> Vec<Rank> {
        let mut r = self.ranks.clone();
        r.sort_unstable();
        r
    }
}

/// Traffic share of each rank (ascending rank order) at normalized time
/// `t` in [0, 1].
pub fn rank_shares(popularity: Popularity, n: usize, t: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![1.0];
    }
    let t = t.clamp(0.0, 1.0);
    match popularity {
        Popularity::Uniform => vec![1.0 / n as f64; n],
        Popularity::ShiftingSkew => {
            let base = 0.5 / (n - 1) as f64;
            let mut v = vec![base; n];
            v[n - 1] = 0.5 + (base - 0.5) * t;
            v[0] = base + (0.5 - base) * t;
            v
        }
        Popularity::Exponential => normalize((0..n).map(|i| (-(i as f64)).exp()).collect()),
        Popularity::PowerLaw { alpha } => normalize((0..n).map(|i| ((i + 1) as f64).powf(-alpha)).collect()),
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Splits `total` adapters across `ranks` (ascending) with weights
/// (k+1)^-alpha, using largest-remainder rounding and giving every rank at
/// least one adapter.
pub fn assign_power_law_counts(total: usize, ranks: &[Rank], alpha: f64) -> Result<BTreeMap<Rank, usize>, TraceError> {
    let n = ranks.len();
    if n == 0 || total < n {
        return Err(TraceError::InvalidConfig(format!("{total} adapters cannot cover {n} ranks")));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let weights = normalize((0..n).map(|k| ((k + 1) as f64).powf(-alpha)).collect());
    let quotas: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..n).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("n > 0");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(sorted.into_iter().zip(counts).collect())
}

/// Adapters and requests of a generated workload.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedTrace {
    pub adapters: Vec<Adapter>,
    pub requests: Vec<Request>,
}

pub fn adapter_name(rank: Rank, j: usize) -> String {
    format!("r{rank}-a{j:03}")
}

fn weighted_pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub fn generate_trace(cfg: &TraceConfig) -> Result<GeneratedTrace, TraceError> {
    cfg.validate()?;
    let ranks = cfg.sorted_ranks();
    let counts: Vec<usize> = match cfg.adapters {
        AdapterCounts::PerRank { count } => vec![count; ranks.len()],
        AdapterCounts::Total { total, count_skew } => {
            assign_power_law_counts(total, &ranks, count_skew)?.into_values().collect()
        }
    };
    let by_rank: Vec<Vec<Adapter>> = ranks
        .iter()
        .zip(&counts)
        .map(|(&r, &c)| {
            (0..c)
                .map(|j| Adapter::new(adapter_name(r, j), r, u64::from(r) * BYTES_PER_RANK).expect("rank > 0"))
                .collect()
        })
        .collect();
    let within: Vec<Vec<f64>> = counts
        .iter()
        .map(|&c| match cfg.within_rank {
            WithinRank::Uniform => vec![1.0; c],
            WithinRank::PowerLaw { alpha } => (0..c).map(|j| ((j + 1) as f64).powf(-alpha)).collect(),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut times = Vec::new();
    match cfg.arrival {
        ArrivalProcess::Uniform => {
            let n = (cfg.duration * cfg.rps).round() as usize;
            times.extend((0..n).map(|i| i as f64 / cfg.rps));
        }
        ArrivalProcess::Poisson => {
            let gap = Exp::new(cfg.rps).map_err(|e| TraceError::InvalidConfig(e.to_string()))?;
            let mut t = gap.sample(&mut rng);
            while t < cfg.duration {
                times.push(t);
                t += gap.sample(&mut rng);
            }
        }
    }
    let lognormal = |mu: f64, sigma: f64| LogNormal::new(mu, sigma).map_err(|e| TraceError::InvalidConfig(e.to_string()));
    let samplers = match cfg.lengths {
        Lengths::LogNormal {
            prompt_mu,
            prompt_sigma,
            output_mu,
            output_sigma,
        } => Some((lognormal(prompt_mu, prompt_sigma)?, lognormal(output_mu, output_sigma)?)),
        Lengths::Fixed { .. } => None,
    };

    let mut requests = Vec::with_capacity(times.len());
    for (i, t) in times.into_iter().enumerate() {
        let shares = rank_shares(cfg.popularity, ranks.len(), t / cfg.duration);
        let ri = weighted_pick(&mut rng, &shares);
        let aj = weighted_pick(&mut rng, &within[ri]);
        let (prompt, output) = match (cfg.lengths, &samplers) {
            (Lengths::Fixed { prompt, output }, _) => (prompt, output),
            (_, Some((p, o))) => (p.sample(&mut rng).round() as u32, o.sample(&mut rng).round() as u32),
            _ => unreachable!("samplers exist for log-normal lengths"),
        };
        requests.push(Request {
            request_id: format!("q{i:07}"),
            adapter: by_rank[ri][aj].id.clone(),
            prompt_length: prompt.clamp(1, cfg.max_prompt),
            output_length: output.clamp(1, cfg.max_output),
            arrival_time: t,
        });
    }
    Ok(GeneratedTrace {
        adapters: by_rank.into_iter().flatten().collect(),
        requests,
    })
}

const FIELDS: [&str; 6] = ["request_id", "model", "adapter", "prompt_length", "output_length", "timestamp"];

#[derive(Serialize)]
struct Row<'a> {
    request_id: &'a str,
    model: &'a str,
    adapter: &'a str,
    prompt_length: u32,
    output_length: u32,
    timestamp: f64,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_owned(),
        source,
    }
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json" | "ndjson"))
}

/// Writes requests as CSV (with header), or as JSON lines when the path ends
/// in `.jsonl`.
pub fn write_trace(path: &Path, requests: &[Request], model: &str) -> Result<(), TraceError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = io::BufWriter::new(file);
    let rows = requests.iter().map(|r| Row {
        request_id: &r.request_id,
        model,
        adapter: r.adapter.as_str(),
        prompt_length: r.prompt_length,
        output_length: r.output_length,
        timestamp: r.arrival_time,
    });
    if is_jsonl(path) {
        for row in rows {
            serde_json::to_writer(&mut w, &row).map_err(|e| TraceError::Io {
                path: path.to_owned(),
                source: e.into(),
            })?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
    } else {
        let mut c = csv::Writer::from_writer(&mut w);
        for row in rows {
            c.serialize(row).map_err(|e| TraceError::Io {
                path: path.to_owned(),
                source: io::Error::other(e),
            })?;
        }
        c.flush().map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn parse_num<T: std::str::FromStr>(line: u64, field: &'static str, raw: Option<&str>) -> Result<T, TraceError> {
    let raw = raw.map(str::trim).filter(|s| !s.is_empty()).ok_or(TraceError::MissingField { line, field })?;
    raw.parse().map_err(|_| TraceError::BadValue {
        line,
        field,
        value: raw.to_owned(),
    })
}

fn build(line: u64, get: &dyn Fn(&str) -> Option<String>) -> Result<Request, TraceError> {
    let text = |field: &'static str| -> Result<String, TraceError> {
        get(field)
            .map(|s| s.trim().to_owned())
            .filter(|s| !s.is_empty())
            .ok_or(TraceError::MissingField { line, field })
    };
    let request_id = text("request_id")?;
    text("model")?;
    let adapter = text("adapter")?;
    let prompt_length: u32 = parse_num(line, "prompt_length", get("prompt_length").as_deref())?;
    let output_length: u32 = parse_num(line, "output_length", get("output_length").as_deref())?;
    let timestamp: f64 = parse_num(line, "timestamp", get("timestamp").as_deref())?;
    if !timestamp.is_finite() {
        return Err(TraceError::BadValue {
            line,
            field: "timestamp",
            value: timestamp.to_string(),
        });
    }
    if timestamp < 0.0 {
        return Err(TraceError::NegativeTimestamp { line, value: timestamp });
    }
    for (field, v) in [("prompt_length", prompt_length), ("output_length", output_length)] {
        if v == 0 {
            return Err(TraceError::BadValue {
                line,
                field,
                value: "0".into(),
            });
        }
    }
    Ok(Request {
        request_id,
        adapter: AdapterId::new(adapter),
        prompt_length,
        output_length,
        arrival_time: timestamp,
    })
}

/// Reads a CSV (header required) or JSON-lines trace. Rows come back sorted
/// by timestamp, ties kept in file order.
pub fn load_trace(path: &Path) -> Result<Vec<Request>, TraceError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows: Vec<(u64, Request)> = Vec::new();
    let mut first_line = String::new();
    let mut reader = BufReader::new(file);
    reader.read_line(&mut first_line).map_err(io_err(path))?;
    let json = is_jsonl(path) || first_line.trim_start().starts_with('{');
    let file = fs::File::open(path).map_err(io_err(path))?;
    if json {
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| TraceError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            let get = |f: &str| {
                v.get(f).and_then(|x| match x {
                    serde_json::Value::String(s) => Some(s.clone()),
                    serde_json::Value::Number(n) => Some(n.to_string()),
                    _ => None,
                })
            };
            rows.push((line_no, build(line_no, &get)?));
        }
    } else {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
        let headers = rdr
            .headers()
            .map_err(|e| TraceError::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        for f in FIELDS {
            if !headers.iter().any(|h| h == f) {
                return Err(TraceError::MissingField { line: 1, field: f });
            }
        }
        for rec in rdr.records() {
            let rec = rec.map_err(|e| TraceError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line_no = rec.position().map_or(0, |p| p.line());
            let get = |f: &str| headers.iter().position(|h| h == f).and_then(|i| rec.get(i)).map(str::to_owned);
            rows.push((line_no, build(line_no, &get)?));
        }
    }
    let mut seen = BTreeSet::new();
    for (line, r) in &rows {
        if !seen.insert(r.request_id.as_str()) {
            return Err(TraceError::Duplicate {
                line: *line,
                id: r.request_id.clone(),
            });
        }
    }
    let mut out: Vec<Request> = rows.into_iter().map(|(_, r)| r).collect();
    out.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(out)
}

/// Multiplies every timestamp by `current_rps / target_rps`, where the
/// current rate is `(n-1) / (t_last - t_first)`.
pub fn scale_trace_rps(trace: &[Request], target_rps: f64) -> Result<Vec<Request>, TraceError> {
    if !(target_rps > 0.0) || !target_rps.is_finite() {
        return Err(TraceError::BadRate(target_rps));
    }
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        return Err(TraceError::ZeroDuration);
    };
    let span = last.arrival_time - first.arrival_time;
    if trace.len() < 2 || !(span > 0.0) {
        return Err(TraceError::ZeroDuration);
    }
    let factor = ((trace.len() - 1) as f64 / span) / target_rps;
    Ok(trace
        .iter()
        .map(|r| Request {
            arrival_time: r.arrival_time * factor,
            ..r.clone()
        })
        .collect())
}

/// Writes `id,rank,size_bytes` rows.
pub fn write_adapters(path: &Path, adapters: &[Adapter]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TraceError::Io {
        path: path.to_owned(),
        source: io::Error::other(e),
    })?;
    for a in adapters {
        w.serialize(a).map_err(|e| TraceError::Io {
            path: path.to_owned(),
            source: io::Error::other(e),
        })?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_adapters(path: &Path) -> Result<Vec<Adapter>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| TraceError::Io {
        path: path.to_owned(),
        source: io::Error::other(e),
    })?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<Adapter>() {
        let a = rec.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        a.validate().map_err(|e| TraceError::InvalidConfig(e.to_string()))?;
        out.push(a);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shifting_skew_endpoints_and_midpoint() {
        let start = rank_shares(Popularity::ShiftingSkew, 5, 0.0);
        assert_eq!(start, vec![0.125, 0.125, 0.125, 0.125, 0.5]);
        let end = rank_shares(Popularity::ShiftingSkew, 5, 1.0);
        assert_eq!(end, vec![0.5, 0.125, 0.125, 0.125, 0.125]);
        let mid = rank_shares(Popularity::ShiftingSkew, 5, 0.5);
        assert!((mid[0] - 0.3125).abs() < 1e-12 && (mid[4] - 0.3125).abs() < 1e-12);
        assert!(mid[1..4].iter().all(|&x| x == 0.125));
    }

    #[test]
    fn exponential_is_decreasing_and_time_invariant() {
        let a = rank_shares(Popularity::Exponential, 5, 0.0);
        assert_eq!(a, rank_shares(Popularity::Exponential, 5, 0.9));
        assert!(a.windows(2).all(|w| w[0] > w[1]));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_law_counts() {
        let flat = assign_power_law_counts(25, &DEFAULT_RANKS, 0.0).unwrap();
        assert!(flat.values().all(|&c| c == 5));

        let c = assign_power_law_counts(100, &DEFAULT_RANKS, 1.0).unwrap();
        assert_eq!(c.values().sum::<usize>(), 100);
        assert!(c.values().all(|&x| x >= 1));
        // brute-force normalization: 1/(k+1) over k=0..4 sums to 137/60
        let expect: Vec<f64> = (1..=5).map(|k| 100.0 * 60.0 / (137.0 * k as f64)).collect();
        for (got, want) in c.values().zip(expect) {
            assert!((*got as f64 - want).abs() < 1.0, "{got} vs {want}");
        }

        let steep = assign_power_law_counts(10, &DEFAULT_RANKS, 30.0).unwrap();
        assert_eq!(steep[&8], 6);
        assert!(steep.values().skip(1).all(|&x| x == 1));
        assert!(assign_power_law_counts(3, &DEFAULT_RANKS, 1.0).is_err());
    }

    #[test]
    fn twenty_five_uniform_adapters_are_five_per_rank() {
        let g = generate_trace(&TraceConfig {
            duration: 10.0,
            ..TraceConfig::default()
        })
        .unwrap();
        assert_eq!(g.adapters.len(), 25);
        for r in DEFAULT_RANKS {
            assert_eq!(g.adapters.iter().filter(|a| a.rank == r).count(), 5);
        }
    }

    #[test]
    fn poisson_gaps_match_rate() {
        let g = generate_trace(&TraceConfig {
            duration: 10_000.0,
            rps: 10.0,
            seed: 3,
            ..TraceConfig::default()
        })
        .unwrap();
        let gaps: Vec<f64> = g.requests.windows(2).map(|w| w[1].arrival_time - w[0].arrival_time).collect();
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 0.1).abs() / 0.1 < 0.02, "mean {mean}");
        let cv = sd / mean;
        assert!((0.95..=1.05).contains(&cv), "cv {cv}");
    }

    #[test]
    fn early_shares_follow_the_start_law() {
        let cfg = TraceConfig {
            duration: 100_000.0,
            rps: 10.0,
            popularity: Popularity::ShiftingSkew,
            seed: 11,
            ..TraceConfig::default()
        };
        let g = generate_trace(&cfg).unwrap();
        let head: Vec<&Request> = g.requests.iter().filter(|r| r.arrival_time < cfg.duration * 0.01).collect();
        let rank_of: BTreeMap<&AdapterId, Rank> = g.adapters.iter().map(|a| (&a.id, a.rank)).collect();
        let n = head.len() as f64;
        let law = rank_shares(Popularity::ShiftingSkew, 5, 0.0);
        for (i, r) in DEFAULT_RANKS.iter().enumerate() {
            let share = head.iter().filter(|q| rank_of[&q.adapter] == *r).count() as f64 / n;
            assert!((share - law[i]).abs() <= 0.02, "rank {r}: {share}");
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = TraceConfig {
            duration: 100.0,
            rps: 5.0,
            popularity: Popularity::PowerLaw { alpha: 1.2 },
            within_rank: WithinRank::PowerLaw { alpha: 1.0 },
            ..TraceConfig::default()
        };
        assert_eq!(generate_trace(&cfg).unwrap(), generate_trace(&cfg).unwrap());
    }

    #[test]
    fn lognormal_lengths_are_clamped() {
        let g = generate_trace(&TraceConfig {
            duration: 200.0,
            rps: 20.0,
            lengths: Lengths::LogNormal {
                prompt_mu: 9.0,
                prompt_sigma: 1.0,
                output_mu: 4.0,
                output_sigma: 1.0,
            },
            max_prompt: 4096,
            ..TraceConfig::default()
        })
        .unwrap();
        assert!(g.requests.iter().all(|r| (1..=4096).contains(&r.prompt_length) && r.output_length >= 1));
        assert!(g.requests.iter().any(|r| r.prompt_length == 4096));
    }

    #[test]
    fn uniform_arrivals_are_evenly_spaced() {
        let g = generate_trace(&TraceConfig {
            duration: 10.0,
            rps: 4.0,
            arrival: ArrivalProcess::Uniform,
            ..TraceConfig::default()
        })
        .unwrap();
        assert_eq!(g.requests.len(), 40);
        assert!(g.requests.windows(2).all(|w| (w[1].arrival_time - w[0].arrival_time - 0.25).abs() < 1e-12));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TraceConfig { rps: 0.0, ..TraceConfig::default() },
            TraceConfig { ranks: vec![], ..TraceConfig::default() },
            TraceConfig { popularity: Popularity::PowerLaw { alpha: 0.0 }, ..TraceConfig::default() },
            TraceConfig { adapters: AdapterCounts::Total { total: 2, count_skew: 1.0 }, ..TraceConfig::default() },
        ] {
            assert!(generate_trace(&cfg).is_err());
        }
    }

    #[test]
    fn rescaling() {
        let mk = |ts: &[f64]| -> Vec<Request> {
            ts.iter()
                .enumerate()
                .map(|(i, &t)| Request {
                    request_id: format!("r{i}"),
                    adapter: "a".into(),
                    prompt_length: 1,
                    output_length: 1,
                    arrival_time: t,
                })
                .collect()
        };
        let trace = mk(&[0.0, 1.0, 4.0, 6.0]);
        // current rate 3 requests / 6 s = 0.5 rps
        let doubled = scale_trace_rps(&trace, 1.0).unwrap();
        let gaps: Vec<f64> = doubled.windows(2).map(|w| w[1].arrival_time - w[0].arrival_time).collect();
        assert_eq!(gaps, vec![0.5, 1.5, 1.0]);
        let same = scale_trace_rps(&trace, 0.5).unwrap();
        assert_eq!(same, trace);
        assert!(matches!(scale_trace_rps(&mk(&[2.0, 2.0]), 1.0), Err(TraceError::ZeroDuration)));
        assert!(matches!(scale_trace_rps(&mk(&[1.0]), 1.0), Err(TraceError::ZeroDuration)));
    }

    proptest! {
        #[test]
        fn shares_always_sum_to_one(n in 1usize..8, t in 0.0f64..=1.0, alpha in 0.1f64..3.0) {
            for law in [Popularity::Uniform, Popularity::ShiftingSkew, Popularity::Exponential, Popularity::PowerLaw { alpha }] {
                let s = rank_shares(law, n, t);
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(s.iter().all(|&x| x >= 0.0));
            }
        }

        #[test]
        fn counts_hit_the_total(total in 5usize..400, alpha in 0.0f64..4.0) {
            let c = assign_power_law_counts(total, &DEFAULT_RANKS, alpha).unwrap();
            prop_assert_eq!(c.values().sum::<usize>(), total);
            prop_assert!(c.values().all(|&x| x >= 1));
        }
    }
}
