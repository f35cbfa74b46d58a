//! Core data types shared by every other module.
//!
//! All types here are plain values: immutable once constructed and cheap to
//! share between readers. Validation happens at construction so downstream
//! code can rely on the invariants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// LoRA rank. Zero means "no adapter" (base model only).
pub type Rank = u32;

/// Absolute tolerance on `sum(phi) == 1` for a routed adapter.
pub const PHI_TOLERANCE: f64 = 1e-9;
/// Sums within this distance of one are renormalized on construction.
pub const PHI_RENORMALIZE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("adapter {0:?}: rank must be >= 1")]
    ZeroRank(AdapterId),
    #[error("adapter {0:?}: size_bytes must be >= 1")]
    ZeroSize(AdapterId),
    #[error("duplicate adapter id {0:?}")]
    DuplicateAdapter(AdapterId),
    #[error("server {server} out of range for cluster of {k} servers")]
    ServerOutOfRange { server: usize, k: usize },
    #[error("adapter {adapter:?}: phi {phi} outside [0, 1]")]
    PhiOutOfRange { adapter: AdapterId, phi: f64 },
    #[error("adapter {adapter:?}: sum(phi) = {sum}, expected 1")]
    PhiSum { adapter: AdapterId, sum: f64 },
    #[error("adapter {adapter:?} listed twice on server {server}")]
    DuplicatePair { adapter: AdapterId, server: usize },
    #[error("request {0:?}: prompt_length and output_length must be >= 1")]
    EmptyRequest(String),
    #[error("request {0:?}: arrival_time must be finite and >= 0")]
    BadArrival(String),
    #[error("operating point for rank {rank} must be > 0 (got {value})")]
    NonPositiveOperatingPoint { rank: Rank, value: f64 },
    #[error("operating points must be non-increasing in rank: rank {higher} has {higher_tps} > rank {lower} with {lower_tps}")]
    OperatingPointsIncreasing {
        lower: Rank,
        lower_tps: f64,
        higher: Rank,
        higher_tps: f64,
    },
    #[error("invalid routing table: {0}")]
    InvalidTable(String),
}

/// Opaque adapter identifier. Nothing is parsed out of it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterId(String);

impl AdapterId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AdapterId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for AdapterId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adapter {
    pub id: AdapterId,
    pub rank: Rank,
    pub size_bytes: u64,
}

impl Adapter {
    pub fn new(id: impl Into<AdapterId>, rank: Rank, size_bytes: u64) -> Result<Self, DomainError> {
        let adapter = Self {
            id: id.into(),
            rank,
            size_bytes,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.rank == 0 {
            return Err(DomainError::ZeroRank(self.id.clone()));
        }
        if self.size_bytes == 0 {
            return Err(DomainError::ZeroSize(self.id.clone()));
        }
        Ok(())
    }
}

/// Checks every adapter and rejects duplicate ids.
pub fn validate_adapters(adapters: &[Adapter]) -> Result<(), DomainError> {
    let mut seen = BTreeSet::new();
    for a in adapters {
        a.validate()?;
        if !seen.insert(&a.id) {
            return Err(DomainError::DuplicateAdapter(a.id.clone()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServerId(pub usize);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub server: ServerId,
    pub phi: f64,
}

/// A violated routing-table invariant, reported as data.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    PhiSum { adapter: AdapterId, sum: f64 },
    PhiOutOfRange { adapter: AdapterId, server: ServerId, phi: f64 },
    DuplicateServer { adapter: AdapterId, server: ServerId },
    NoEntries { adapter: AdapterId },
    Uncovered { adapter: AdapterId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PhiSum { adapter, sum } => write!(f, "Σφ={sum} for {adapter}"),
            Violation::PhiOutOfRange { adapter, server, phi } => {
                write!(f, "φ={phi} outside [0,1] for {adapter} on {server}")
            }
            Violation::DuplicateServer { adapter, server } => {
                write!(f, "{server} listed twice for {adapter}")
            }
            Violation::NoEntries { adapter } => write!(f, "no route entries for {adapter}"),
            Violation::Uncovered { adapter } => write!(f, "{adapter} missing from routing table"),
        }
    }
}

/// Per-adapter fractional routes. Entries are kept in ascending server order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    routes: BTreeMap<AdapterId, Vec<RouteEntry>>,
}

impl RoutingTable {
    /// Wraps raw routes without checking them; use [`RoutingTable::validate`].
    pub fn from_routes(routes: BTreeMap<AdapterId, Vec<RouteEntry>>) -> Self {
        Self { routes }
    }

    pub fn routes(&self) -> &BTreeMap<AdapterId, Vec<RouteEntry>> {
        &self.routes
    }

    pub fn entries(&self, adapter: &AdapterId) -> Option<&[RouteEntry]> {
        self.routes.get(adapter).map(Vec::as_slice)
    }

    /// φ for `(adapter, server)`, zero when absent.
    pub fn phi(&self, adapter: &AdapterId, server: ServerId) -> f64 {
        self.routes
            .get(adapter)
            .and_then(|es| es.iter().find(|e| e.server == server))
            .map_or(0.0, |e| e.phi)
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Empty iff every invariant holds.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (adapter, entries) in &self.routes {
            if entries.is_empty() {
                out.push(Violation::NoEntries {
                    adapter: adapter.clone(),
                });
                continue;
            }
            let mut seen = BTreeSet::new();
            let mut sum = 0.0;
            for e in entries {
                if !(0.0..=1.0).contains(&e.phi) {
                    out.push(Violation::PhiOutOfRange {
                        adapter: adapter.clone(),
                        server: e.server,
                        phi: e.phi,
                    });
                }
                if !seen.insert(e.server) {
                    out.push(Violation::DuplicateServer {
                        adapter: adapter.clone(),
                        server: e.server,
                    });
                }
                sum += e.phi;
            }
            if (sum - 1.0).abs() > PHI_TOLERANCE {
                out.push(Violation::PhiSum {
                    adapter: adapter.clone(),
                    sum,
                });
            }
        }
        out
    }

    /// [`RoutingTable::validate`] plus coverage of every cluster adapter.
    pub fn validate_against(&self, adapters: &[Adapter]) -> Vec<Violation> {
        let mut out = self.validate();
        for a in adapters {
            if !self.routes.contains_key(&a.id) {
                out.push(Violation::Uncovered {
                    adapter: a.id.clone(),
                });
            }
        }
        out
    }
}

/// Free-function form of [`RoutingTable::validate`].
pub fn validate_routing_table(table: &RoutingTable) -> Vec<Violation> {
    table.validate()
}

/// Per-server bundles of `(adapter, phi)` produced by a placement policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    per_server: Vec<Vec<(AdapterId, f64)>>,
    pub generation: u64,
}

impl Assignment {
    /// An assignment over `k` servers with nothing placed.
    pub fn empty(k: usize) -> Self {
        Self {
            per_server: vec![Vec::new(); k],
            generation: 0,
        }
    }

    /// Builds and validates an assignment. Entries with φ == 0 are dropped,
    /// per-adapter sums within [`PHI_RENORMALIZE`] of one are renormalized.
    pub fn new(per_server: Vec<Vec<(AdapterId, f64)>>, generation: u64) -> Result<Self, DomainError> {
        let k = per_server.len();
        let mut sums: BTreeMap<AdapterId, f64> = BTreeMap::new();
        let mut cleaned = Vec::with_capacity(k);
        for (s, bundle) in per_server.into_iter().enumerate() {
            let mut seen = BTreeSet::new();
            let mut keep = Vec::with_capacity(bundle.len());
            for (adapter, phi) in bundle {
                if !phi.is_finite() || !(0.0..=1.0 + PHI_RENORMALIZE).contains(&phi) {
                    return Err(DomainError::PhiOutOfRange { adapter, phi });
                }
                if !seen.insert(adapter.clone()) {
                    return Err(DomainError::DuplicatePair { adapter, server: s });
                }
                if phi == 0.0 {
                    continue;
                }
                *sums.entry(adapter.clone()).or_default() += phi;
                keep.push((adapter, phi));
            }
            cleaned.push(keep);
        }
        for (adapter, sum) in &sums {
            if (sum - 1.0).abs() > PHI_RENORMALIZE {
                return Err(DomainError::PhiSum {
                    adapter: adapter.clone(),
                    sum: *sum,
                });
            }
        }
        for bundle in &mut cleaned {
            for (adapter, phi) in bundle.iter_mut() {
                let sum = sums[adapter];
                if (sum - 1.0).abs() > PHI_TOLERANCE {
                    *phi /= sum;
                }
            }
            bundle.sort_by(|a, b| a.0.cmp(&b.0));
        }
        Ok(Self {
            per_server: cleaned,
            generation,
        })
    }

    pub fn num_servers(&self) -> usize {
        self.per_server.len()
    }

    pub fn bundle(&self, server: ServerId) -> &[(AdapterId, f64)] {
        &self.per_server[server.0]
    }

    pub fn bundles(&self) -> &[Vec<(AdapterId, f64)>] {
        &self.per_server
    }

    pub fn is_empty(&self) -> bool {
        self.per_server.iter().all(Vec::is_empty)
    }

    /// All `(server, adapter, phi)` triples in server order.
    pub fn triples(&self) -> impl Iterator<Item = (ServerId, &AdapterId, f64)> + '_ {
        self.per_server
            .iter()
            .enumerate()
            .flat_map(|(s, b)| b.iter().map(move |(a, phi)| (ServerId(s), a, *phi)))
    }

    /// Distinct adapters placed anywhere.
    pub fn adapters(&self) -> BTreeSet<&AdapterId> {
        self.triples().map(|(_, a, _)| a).collect()
    }

    /// Transposes into a routing table.
    pub fn to_routing_table(&self) -> RoutingTable {
        let mut routes: BTreeMap<AdapterId, Vec<RouteEntry>> = BTreeMap::new();
        for (server, adapter, phi) in self.triples() {
            routes
                .entry(adapter.clone())
                .or_default()
                .push(RouteEntry { server, phi });
        }
        RoutingTable::from_routes(routes)
    }

    /// Inverse of [`Assignment::to_routing_table`] for a cluster of `k` servers.
    pub fn from_routing_table(table: &RoutingTable, k: usize, generation: u64) -> Result<Self, DomainError> {
        let mut per_server = vec![Vec::new(); k];
        for (adapter, entries) in table.routes() {
            for e in entries {
                if e.server.0 >= k {
                    return Err(DomainError::ServerOutOfRange { server: e.server.0, k });
                }
                per_server[e.server.0].push((adapter.clone(), e.phi));
            }
        }
        Self::new(per_server, generation)
    }

    /// Returns a copy whose bundle `i` moves to server `labels[i]`.
    pub fn relabel(&self, labels: &[usize]) -> Self {
        let mut per_server = vec![Vec::new(); self.per_server.len()];
        for (i, bundle) in self.per_server.iter().enumerate() {
            per_server[labels[i]] = bundle.clone();
        }
        Self {
            per_server,
            generation: self.generation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: String,
    pub adapter: AdapterId,
    pub prompt_length: u32,
    pub output_length: u32,
    pub arrival_time: f64,
}

impl Request {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.prompt_length == 0 || self.output_length == 0 {
            return Err(DomainError::EmptyRequest(self.request_id.clone()));
        }
        if !self.arrival_time.is_finite() || self.arrival_time < 0.0 {
            return Err(DomainError::BadArrival(self.request_id.clone()));
        }
        Ok(())
    }

    /// Tokens the request contributes to demand accounting.
    pub fn total_tokens(&self) -> u64 {
        u64::from(self.prompt_length) + u64::from(self.output_length)
    }
}

/// Per-rank tokens-per-second capacity of one server under the SLO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointTable {
    max_tps: BTreeMap<Rank, f64>,
}

impl OperatingPointTable {
    pub fn new(max_tps: BTreeMap<Rank, f64>) -> Result<Self, DomainError> {
        let mut prev: Option<(Rank, f64)> = None;
        for (&rank, &value) in &max_tps {
            if !(value > 0.0) || !value.is_finite() {
                return Err(DomainError::NonPositiveOperatingPoint { rank, value });
            }
            if let Some((lower, lower_tps)) = prev {
                if value > lower_tps {
                    return Err(DomainError::OperatingPointsIncreasing {
                        lower,
                        lower_tps,
                        higher: rank,
                        higher_tps: value,
                    });
                }
            }
            prev = Some((rank, value));
        }
        Ok(Self { max_tps })
    }

    pub fn get(&self, rank: Rank) -> Option<f64> {
        self.max_tps.get(&rank).copied()
    }

    pub fn ranks(&self) -> impl Iterator<Item = Rank> + '_ {
        self.max_tps.keys().copied()
    }

    pub fn as_map(&self) -> &BTreeMap<Rank, f64> {
        &self.max_tps
    }

    /// Capacity at `rank`, falling back to the nearest profiled rank above it
    /// (or the highest profiled rank) when `rank` itself was not profiled.
    pub fn at_least(&self, rank: Rank) -> Option<f64> {
        self.max_tps
            .range(rank..)
            .next()
            .or_else(|| self.max_tps.iter().next_back())
            .map(|(_, v)| *v)
    }
}
