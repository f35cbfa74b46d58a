//! Request routing: weighted draws from the routing table, and a load-aware
//! router that assumes every adapter is available everywhere.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{prefill_seconds, CostParams};
use crate::domain::{AdapterId, Assignment, DomainError, Rank, Request, RoutingTable, ServerId};

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("adapter {0} is not in the routing table")]
    UnknownAdapter(AdapterId),
    #[error("adapter {0} has no server with positive weight")]
    NoRoute(AdapterId),
    #[error("cluster snapshot is empty")]
    EmptySnapshot,
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    /// Weighted draw from the routing table.
    Table,
    /// Least estimated completion time over all servers.
    Toppings,
}

impl RouterKind {
    pub const NAMES: [&'static str; 2] = ["table", "toppings"];

    pub fn name(self) -> &'static str {
        match self {
            Self::Table => "table",
            Self::Toppings => "toppings",
        }
    }

    /// Label used in reports.
    pub fn report_name(self) -> &'static str {
        match self {
            Self::Table => "table",
            Self::Toppings => "toppings-oracle",
        }
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(Self::Table),
            "toppings" | "toppings-oracle" => Ok(Self::Toppings),
            _ => Err(format!("unknown router {s:?}; expected one of: {}", Self::NAMES.join(", "))),
        }
    }
}

pub fn build_routing_table(assignment: &Assignment) -> Result<RoutingTable, RoutingError> {
    let table = assignment.to_routing_table();
    if let Some(v) = table.validate().into_iter().next() {
        return Err(RoutingError::Domain(DomainError::InvalidTable(v.to_string())));
    }
    Ok(table)
}

/// Picks a server for `request` with probability equal to its φ.
pub fn route<R: Rng + ?Sized>(request: &Request, table: &RoutingTable, rng: &mut R) -> Result<ServerId, RoutingError> {
    route_adapter(&request.adapter, table, rng)
}

pub fn route_adapter<R: Rng + ?Sized>(
    adapter: &AdapterId,
    table: &RoutingTable,
    rng: &mut R,
) -> Result<ServerId, RoutingError> {
    let entries = table
        .entries(adapter)
        .ok_or_else(|| RoutingError::UnknownAdapter(adapter.clone()))?;
    let total: f64 = entries.iter().map(|e| e.phi.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(RoutingError::NoRoute(adapter.clone()));
    }
    if entries.len() == 1 {
        return Ok(entries[0].server);
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for e in entries.iter().filter(|e| e.phi > 0.0) {
        acc += e.phi;
        last = Some(e.server);
        if u < acc {
            return Ok(e.server);
        }
    }
    // only reachable through rounding at the top of the range
    last.ok_or_else(|| RoutingError::NoRoute(adapter.clone()))
}

/// What the load-aware router sees of one server.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerLoad {
    /// Seconds left on the batch currently executing.
    pub busy_remaining: f64,
    /// Prompt tokens waiting for prefill.
    pub queued_tokens: u64,
    pub queued_requests: usize,
    pub queued_max_rank: Rank,
    /// Highest rank among requests currently decoding.
    pub resident_max_rank: Rank,
}

impl ServerLoad {
    /// Outstanding prefill work in model seconds.
    pub fn backlog(&self, p: &CostParams) -> f64 {
        let mut t = self.busy_remaining.max(0.0);
        if self.queued_requests > 0 {
            let budget = u64::from(p.token_budget.max(1));
            let batches = self.queued_tokens.div_ceil(budget).max(1);
            let rank = self.queued_max_rank.max(self.resident_max_rank);
            t += (p.b * batches as f64 + p.a * self.queued_tokens as f64) * p.rank_factor(rank);
        }
        t
    }

    /// Backlog plus this request's own prefill on the server.
    pub fn completion_estimate(&self, prompt_tokens: u64, rank: Rank, p: &CostParams) -> f64 {
        let eff = rank.max(self.resident_max_rank).max(self.queued_max_rank);
        self.backlog(p) + prefill_seconds(prompt_tokens, eff, p)
    }
}

/// Server with the least estimated completion time for `request`; ties go to
/// the lowest index.
pub fn route_toppings(request: &Request, rank: Rank, snapshot: &[ServerLoad], p: &CostParams) -> Result<ServerId, RoutingError> {
    let tokens = u64::from(request.prompt_length);
    let mut best: Option<(usize, f64)> = None;
    for (s, load) in snapshot.iter().enumerate() {
        let t = load.completion_estimate(tokens, rank, p);
        if best.is_none_or(|(_, bt)| t < bt) {
            best = Some((s, t));
        }
    }
    best.map(|(s, _)| ServerId(s)).ok_or(RoutingError::EmptySnapshot)
}
