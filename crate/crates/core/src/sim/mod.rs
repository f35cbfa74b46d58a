//! Discrete-event simulation of a serving cluster.

mod engine;
mod profile;
mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::run;
pub use profile::{profile_operating_points, ProfileConfig, ProfileError};
pub use server::{schedule_server, Batch, Decision, Decoding, Finished, QueuedRequest, ServerState};

use crate::costmodel::CostParams;
use crate::demand::{DemandError, Extrapolation, DEFAULT_DEMAND_FLOOR, DEFAULT_HISTORY_DEPTH};
use crate::domain::{AdapterId, Rank, RoutingTable, ServerId};
use crate::placement::PlacementError;
use crate::pool::{AdapterLocationTable, PoolError, DEFAULT_GPU_SLOTS};
use crate::routing::RoutingError;

pub const DEFAULT_TIMEOUT_SECONDS: f64 = 120.0;
pub const DEFAULT_REBALANCE_SECONDS: f64 = 60.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub servers: usize,
    pub cost: CostParams,
    /// Rebalance period, also the demand window length.
    pub rebalance_window: f64,
    /// Requests whose time to first token exceeds this are dropped.
    pub timeout: f64,
    pub gpu_slots: usize,
    pub demand_floor: f64,
    pub history_depth: usize,
    pub extrapolation: Extrapolation,
    /// Check universal adapter coverage after every event.
    pub audit: bool,
    /// Stop recomputing placement after this time.
    pub freeze_rebalance_after: Option<f64>,
    /// Stop at the last arrival instead of draining in-flight work.
    pub stop_at_trace_end: bool,
    /// Run decodes only when no prefill is queued.
    pub strict_prefill_priority: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            servers: 4,
            cost: CostParams::default(),
            rebalance_window: DEFAULT_REBALANCE_SECONDS,
            timeout: DEFAULT_TIMEOUT_SECONDS,
            gpu_slots: DEFAULT_GPU_SLOTS,
            demand_floor: DEFAULT_DEMAND_FLOOR,
            history_depth: DEFAULT_HISTORY_DEPTH,
            extrapolation: Extrapolation::Linear,
            audit: false,
            freeze_rebalance_after: None,
            stop_at_trace_end: false,
            strict_prefill_priority: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cluster must have at least one server")]
    NoServers,
    #[error("request {request_id} uses adapter {adapter}, which is not in the cluster config")]
    UnknownAdapter { request_id: String, adapter: AdapterId },
    #[error("request {request_id} has a {prompt}-token prompt, above the {budget}-token prefill budget")]
    PromptTooLong { request_id: String, prompt: u32, budget: u32 },
    #[error("trace is not sorted by arrival time at request {0}")]
    Unsorted(String),
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error("rebalance window and timeout must be positive")]
    BadConfig,
    #[error("coverage lost at t={time}: {source}")]
    Coverage { time: f64, source: PoolError },
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Cost(#[from] crate::costmodel::CostError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Completed,
    TimedOut,
    InFlight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: String,
    pub adapter: AdapterId,
    pub rank: Rank,
    pub arrival: f64,
    pub server: Option<ServerId>,
    pub ttft: Option<f64>,
    /// Prefill start minus arrival.
    pub queue_time: Option<f64>,
    pub tbt: Vec<f32>,
    pub status: RequestStatus,
    /// Whether the request waited on an adapter transfer.
    pub fetched: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerStats {
    pub requests: usize,
    pub queue_time_p95: f64,
    pub prefill_time_p95: f64,
    pub max_resident_adapters: usize,
    pub final_resident_adapters: usize,
    /// Remote transfers into this server.
    pub fetch_count: u64,
    pub fetch_bytes: u64,
    pub host_loads: u64,
    pub busy_seconds: f64,
}

/// Placement churn at one rebalance tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMigration {
    pub time: f64,
    pub generation: u64,
    /// (server, adapter) pairs that gained φ > 0.
    pub migrations: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: String,
    pub router: String,
    pub per_request: Vec<RequestOutcome>,
    pub per_server: Vec<ServerStats>,
    pub epochs: Vec<EpochMigration>,
    /// Prompt plus generated tokens of finished requests.
    pub wall_tokens: u64,
    pub completed: usize,
    pub timed_out: usize,
    pub in_flight: usize,
    /// Requests unfinished when the last arrival was processed.
    pub in_flight_at_trace_end: usize,
    pub events: u64,
    pub final_routing: RoutingTable,
    pub final_locations: AdapterLocationTable,
}

impl SimResult {
    pub fn empty(policy: &str, router: &str, k: usize) -> Self {
        Self {
            policy: policy.to_owned(),
            router: router.to_owned(),
            per_request: Vec::new(),
            per_server: vec![ServerStats::default(); k],
            epochs: Vec::new(),
            wall_tokens: 0,
            completed: 0,
            timed_out: 0,
            in_flight: 0,
            in_flight_at_trace_end: 0,
            events: 0,
            final_routing: RoutingTable::default(),
            final_locations: AdapterLocationTable::default(),
        }
    }

    pub fn ttfts(&self) -> Vec<f64> {
        self.per_request.iter().filter_map(|r| r.ttft).collect()
    }

    pub fn migrations(&self) -> usize {
        self.epochs.iter().map(|e| e.migrations).sum()
    }

    pub fn migration_bytes(&self) -> u64 {
        self.epochs.iter().map(|e| e.bytes).sum()
    }

    pub fn fetch_bytes(&self) -> u64 {
        self.per_server.iter().map(|s| s.fetch_bytes).sum()
    }

    pub fn max_resident(&self) -> usize {
        self.per_server.iter().map(|s| s.max_resident_adapters).max().unwrap_or(0)
    }

    /// completed + timed out + in flight equals the trace size.
    pub fn conserves(&self, trace_len: usize) -> bool {
        self.completed + self.timed_out + self.in_flight == trace_len && self.per_request.len() == trace_len
    }
}
