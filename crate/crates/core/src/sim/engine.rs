use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::server::{Decoding, Decision, Finished, QueuedRequest, ServerState};
use super::{EpochMigration, RequestOutcome, RequestStatus, ServerStats, SimConfig, SimError, SimResult};
use crate::demand::{DemandConfig, TpsHistory};
use crate::domain::{Adapter, AdapterId, Assignment, OperatingPointTable, Rank, Request, RoutingTable, ServerId};
use crate::metrics::percentile;
use crate::placement::{initial_placement, place_with_demand, PlacementPolicy};
use crate::pool::{AdapterPool, FetchKind};
use crate::routing::{build_routing_table, route_adapter, route_toppings, RouterKind, ServerLoad};

#[derive(Clone, Debug, PartialEq)]
enum EventKind {
    Arrival(usize),
    BatchDone(usize),
    FetchDone(usize, usize),
    RebalanceTick,
    TraceEnd,
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then(self.seq.cmp(&other.seq))
    }
}

struct PendingFetch {
    source: Option<ServerId>,
    waiters: Vec<usize>,
}

struct AdapterInfo {
    id: AdapterId,
    rank: Rank,
    size: u64,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    trace: &'a [Request],
    adapters: &'a [Adapter],
    op_points: &'a OperatingPointTable,
    policy: PlacementPolicy,
    router: RouterKind,
    info: Vec<AdapterInfo>,
    req_adapter: Vec<usize>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: f64,
    rng: ChaCha8Rng,
    servers: Vec<ServerState>,
    pool: AdapterPool,
    history: TpsHistory,
    assignment: Assignment,
    table: RoutingTable,
    fetches: BTreeMap<(usize, usize), PendingFetch>,
    out: Vec<RequestOutcome>,
    stats: Vec<ServerStats>,
    queue_samples: Vec<Vec<f64>>,
    prefill_samples: Vec<Vec<f64>>,
    epochs: Vec<EpochMigration>,
    wall_tokens: u64,
    completed: usize,
    timed_out: usize,
    in_flight_at_end: Option<usize>,
    events: u64,
    last_arrival: f64,
}

/// Runs `trace` to completion on a cluster of `cfg.servers` servers.
pub fn run(
    trace: &[Request],
    adapters: &[Adapter],
    op_points: &OperatingPointTable,
    policy: PlacementPolicy,
    router: RouterKind,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimResult, SimError> {
    let k = cfg.servers;
    if k == 0 {
        return Err(SimError::NoServers);
    }
    if !(cfg.rebalance_window > 0.0) || !(cfg.timeout > 0.0) {
        return Err(SimError::BadConfig);
    }
    cfg.cost.validate()?;

    let info: Vec<AdapterInfo> = adapters
        .iter()
        .map(|a| AdapterInfo {
            id: a.id.clone(),
            rank: a.rank,
            size: a.size_bytes,
        })
        .collect();
    let index: BTreeMap<&AdapterId, usize> = adapters.iter().enumerate().map(|(i, a)| (&a.id, i)).collect();
    let mut req_adapter = Vec::with_capacity(trace.len());
    let mut prev_time = 0.0;
    for r in trace {
        r.validate().map_err(|e| SimError::BadRequest(e.to_string()))?;
        let &i = index.get(&r.adapter).ok_or_else(|| SimError::UnknownAdapter {
            request_id: r.request_id.clone(),
            adapter: r.adapter.clone(),
        })?;
        if r.prompt_length > cfg.cost.token_budget {
            return Err(SimError::PromptTooLong {
                request_id: r.request_id.clone(),
                prompt: r.prompt_length,
                budget: cfg.cost.token_budget,
            });
        }
        if r.arrival_time < prev_time {
            return Err(SimError::Unsorted(r.request_id.clone()));
        }
        prev_time = r.arrival_time;
        req_adapter.push(i);
    }

    let assignment = initial_placement(policy, k, adapters, op_points, cfg.demand_floor, seed)?;
    let table = build_routing_table(&assignment)?;
    let pool = AdapterPool::new(k, adapters, &assignment, cfg.gpu_slots);
    let history = TpsHistory::new(
        adapters.iter().map(|a| &a.id),
        DemandConfig {
            window_seconds: cfg.rebalance_window,
            depth: cfg.history_depth,
            floor: cfg.demand_floor,
            extrapolation: cfg.extrapolation,
        },
    )?;

    let mut sim = Sim {
        cfg,
        trace,
        adapters,
        op_points,
        policy,
        router,
        info,
        req_adapter,
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        servers: vec![ServerState::with_strict_priority(cfg.strict_prefill_priority); k],
        pool,
        history,
        assignment,
        table,
        fetches: BTreeMap::new(),
        out: trace
            .iter()
            .map(|r| RequestOutcome {
                request_id: r.request_id.clone(),
                adapter: r.adapter.clone(),
                rank: 0,
                arrival: r.arrival_time,
                server: None,
                ttft: None,
                queue_time: None,
                tbt: Vec::new(),
                status: RequestStatus::InFlight,
                fetched: false,
            })
            .collect(),
        stats: vec![ServerStats::default(); k],
        queue_samples: vec![Vec::new(); k],
        prefill_samples: vec![Vec::new(); k],
        epochs: Vec::new(),
        wall_tokens: 0,
        completed: 0,
        timed_out: 0,
        in_flight_at_end: None,
        events: 0,
        last_arrival: trace.last().map_or(0.0, |r| r.arrival_time),
    };
    for (o, &a) in sim.out.iter_mut().zip(&sim.req_adapter) {
        o.rank = sim.info[a].rank;
    }
    sim.execute()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Reverse(Event {
            time,
            seq: self.seq,
            kind,
        }));
    }

    fn execute(&mut self) -> Result<(), SimError> {
        if self.trace.is_empty() {
            return Ok(());
        }
        self.push(self.trace[0].arrival_time, EventKind::Arrival(0));
        if self.cfg.rebalance_window <= self.last_arrival {
            self.push(self.cfg.rebalance_window, EventKind::RebalanceTick);
        }
        while let Some(Reverse(ev)) = self.heap.pop() {
            self.now = ev.time;
            self.events += 1;
            match ev.kind {
                EventKind::Arrival(i) => self.on_arrival(i)?,
                EventKind::BatchDone(s) => self.on_batch_done(s),
                EventKind::FetchDone(s, a) => self.on_fetch_done(s, a)?,
                EventKind::RebalanceTick => self.on_tick()?,
                EventKind::TraceEnd => {
                    self.in_flight_at_end = Some(self.trace.len() - self.completed - self.timed_out);
                    if self.cfg.stop_at_trace_end {
                        break;
                    }
                }
            }
            if self.cfg.audit {
                self.pool
                    .check_coverage()
                    .map_err(|source| SimError::Coverage { time: self.now, source })?;
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<ServerLoad> {
        self.servers.iter().map(|s| s.snapshot(self.now)).collect()
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), SimError> {
        if i + 1 < self.trace.len() {
            self.push(self.trace[i + 1].arrival_time, EventKind::Arrival(i + 1));
        } else {
            self.push(self.now, EventKind::TraceEnd);
        }
        let req = &self.trace[i];
        let a = self.req_adapter[i];
        let adapter = &self.info[a].id;
        self.history.record_request(adapter, req.total_tokens(), self.now)?;

        let s = match self.router {
            RouterKind::Table => route_adapter(adapter, &self.table, &mut self.rng)?,
            RouterKind::Toppings => route_toppings(req, self.info[a].rank, &self.snapshot(), &self.cfg.cost)?,
        };
        self.out[i].server = Some(s);
        self.stats[s.0].requests += 1;
        self.pool.pin(s, adapter);

        if let Some(f) = self.fetches.get_mut(&(s.0, a)) {
            f.waiters.push(i);
            self.out[i].fetched = true;
            return Ok(());
        }
        let loads: Vec<f64> = self.snapshot().iter().map(|l| l.backlog(&self.cfg.cost)).collect();
        let plan = self.pool.plan_fetch(adapter, s, &loads, &self.cfg.cost)?;
        match plan.kind {
            FetchKind::AlreadyLocal => {
                let adapter = adapter.clone();
                self.pool.evict_stale(&adapter, &self.table);
                self.pool.touch_gpu(s, &adapter);
                self.enqueue(s.0, i);
            }
            FetchKind::LoadFromHost => {
                let adapter = adapter.clone();
                self.pool.evict_stale(&adapter, &self.table);
                self.stats[s.0].host_loads += 1;
                self.start_fetch(s.0, a, None, plan.latency, i);
            }
            FetchKind::FetchRemote { source } => {
                let adapter = adapter.clone();
                self.pool.pin(source, &adapter);
                self.stats[s.0].fetch_count += 1;
                self.stats[s.0].fetch_bytes += plan.bytes;
                self.start_fetch(s.0, a, Some(source), plan.latency, i);
            }
        }
        Ok(())
    }

    fn start_fetch(&mut self, s: usize, a: usize, source: Option<ServerId>, latency: f64, waiter: usize) {
        self.out[waiter].fetched = true;
        self.fetches.insert(
            (s, a),
            PendingFetch {
                source,
                waiters: vec![waiter],
            },
        );
        self.push(self.now + latency, EventKind::FetchDone(s, a));
    }

    fn on_fetch_done(&mut self, s: usize, a: usize) -> Result<(), SimError> {
        let Some(fetch) = self.fetches.remove(&(s, a)) else {
            return Ok(());
        };
        let adapter = self.info[a].id.clone();
        match fetch.source {
            Some(source) => {
                self.pool.commit_migration(&adapter, ServerId(s), &self.table)?;
                self.pool.unpin(source, &adapter, &self.table);
            }
            None => {
                self.pool.touch_gpu(ServerId(s), &adapter);
                self.pool.evict_stale(&adapter, &self.table);
            }
        }
        for i in fetch.waiters {
            self.enqueue(s, i);
        }
        Ok(())
    }

    fn enqueue(&mut self, s: usize, i: usize) {
        let r = &self.trace[i];
        self.servers[s].enqueue(QueuedRequest {
            idx: i,
            prompt: r.prompt_length,
            output: r.output_length,
            rank: self.info[self.req_adapter[i]].rank,
            arrival: r.arrival_time,
        });
        if !self.servers[s].is_busy() {
            self.schedule(s);
        }
    }

    fn release(&mut self, s: usize, i: usize) {
        let adapter = &self.info[self.req_adapter[i]].id;
        self.pool.unpin(ServerId(s), adapter, &self.table);
    }

    fn time_out(&mut self, s: usize, i: usize) {
        self.out[i].status = RequestStatus::TimedOut;
        self.timed_out += 1;
        self.release(s, i);
    }

    fn complete(&mut self, s: usize, i: usize) {
        self.out[i].status = RequestStatus::Completed;
        self.completed += 1;
        self.wall_tokens += self.trace[i].total_tokens();
        self.release(s, i);
    }

    fn schedule(&mut self, s: usize) {
        let decision = self.servers[s].schedule(self.now, &self.cfg.cost, self.cfg.timeout);
        for q in decision.expired().to_vec() {
            self.time_out(s, q.idx);
        }
        let duration = match decision {
            Decision::Prefill { duration, .. } => {
                let batch: Vec<(usize, f64)> = self.servers[s]
                    .current_prefill()
                    .iter()
                    .map(|q| (q.idx, q.arrival))
                    .collect();
                for (i, arrival) in batch {
                    let wait = self.now - arrival;
                    self.out[i].queue_time = Some(wait);
                    self.queue_samples[s].push(wait);
                    self.prefill_samples[s].push(duration);
                }
                duration
            }
            Decision::Decode { duration, .. } => duration,
            Decision::Idle { .. } => return,
        };
        self.stats[s].busy_seconds += duration;
        self.push(self.now + duration, EventKind::BatchDone(s));
    }

    fn on_batch_done(&mut self, s: usize) {
        match self.servers[s].finish(self.now) {
            Finished::Prefill(batch) => {
                for q in batch {
                    let ttft = self.now - q.arrival;
                    if ttft > self.cfg.timeout {
                        self.time_out(s, q.idx);
                        continue;
                    }
                    self.out[q.idx].ttft = Some(ttft);
                    if q.output <= 1 {
                        self.complete(s, q.idx);
                    } else {
                        self.servers[s].start_decoding(Decoding {
                            idx: q.idx,
                            remaining: q.output - 1,
                            context: u64::from(q.prompt) + 1,
                            rank: q.rank,
                            last_token: self.now,
                        });
                    }
                }
            }
            Finished::Decode(steps) => {
                for (i, gap, done) in steps {
                    self.out[i].tbt.push(gap as f32);
                    if done {
                        self.complete(s, i);
                    }
                }
            }
            Finished::Nothing => {}
        }
        self.schedule(s);
    }

    fn on_tick(&mut self) -> Result<(), SimError> {
        let next = self.now + self.cfg.rebalance_window;
        if next <= self.last_arrival {
            self.push(next, EventKind::RebalanceTick);
        }
        let frozen = self.cfg.freeze_rebalance_after.is_some_and(|t| self.now > t);
        if !self.policy.is_dynamic() || frozen {
            self.epochs.push(EpochMigration {
                time: self.now,
                generation: self.assignment.generation,
                migrations: 0,
                bytes: 0,
            });
            return Ok(());
        }
        self.history.advance_to(self.now)?;
        let demand = self.history.estimate();
        let outcome = place_with_demand(self.cfg.servers, self.adapters, &demand, self.op_points, &self.assignment)?;
        let index: BTreeMap<&AdapterId, usize> = self.info.iter().enumerate().map(|(i, a)| (&a.id, i)).collect();
        let mut migrations = 0;
        let mut bytes = 0;
        for (s, id, _) in outcome.assignment.triples() {
            if self.table.phi(id, s) <= 0.0 {
                migrations += 1;
                bytes += self.info[index[id]].size;
            }
        }
        self.table = build_routing_table(&outcome.assignment)?;
        self.assignment = outcome.assignment;
        self.epochs.push(EpochMigration {
            time: self.now,
            generation: self.assignment.generation,
            migrations,
            bytes,
        });
        Ok(())
    }

    fn finish(mut self) -> SimResult {
        let k = self.cfg.servers;
        for s in 0..k {
            let st = &mut self.stats[s];
            st.queue_time_p95 = percentile(&self.queue_samples[s], 0.95).unwrap_or(0.0);
            st.prefill_time_p95 = percentile(&self.prefill_samples[s], 0.95).unwrap_or(0.0);
            st.max_resident_adapters = self.pool.peak_resident()[s];
            st.final_resident_adapters = self.pool.resident_count(ServerId(s));
        }
        let in_flight = self.trace.len() - self.completed - self.timed_out;
        SimResult {
            policy: self.policy.name().to_owned(),
            router: self.router.report_name().to_owned(),
            per_request: self.out,
            per_server: self.stats,
            epochs: self.epochs,
            wall_tokens: self.wall_tokens,
            completed: self.completed,
            timed_out: self.timed_out,
            in_flight,
            in_flight_at_trace_end: self.in_flight_at_end.unwrap_or(in_flight),
            events: self.events,
            final_routing: self.table,
            final_locations: self.pool.table().clone(),
        }
    }
}
