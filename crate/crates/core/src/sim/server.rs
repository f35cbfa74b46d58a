use std::collections::{BTreeMap, VecDeque};

use crate::costmodel::{decode_seconds, prefill_time, CostParams, PrefillItem};
use crate::domain::Rank;
use crate::routing::ServerLoad;

/// A request admitted to a server and waiting for prefill.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueuedRequest {
    pub idx: usize,
    pub prompt: u32,
    pub output: u32,
    pub rank: Rank,
    pub arrival: f64,
}

/// A request between its first and last output token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoding {
    pub idx: usize,
    pub remaining: u32,
    pub context: u64,
    pub rank: Rank,
    pub last_token: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Prefill(Vec<QueuedRequest>),
    Decode,
}

/// What a server does next.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Prefill { duration: f64, expired: Vec<QueuedRequest> },
    Decode { duration: f64, expired: Vec<QueuedRequest> },
    Idle { expired: Vec<QueuedRequest> },
}

impl Decision {
    pub fn expired(&self) -> &[QueuedRequest] {
        match self {
            Self::Prefill { expired, .. } | Self::Decode { expired, .. } | Self::Idle { expired } => expired,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct RankCounter(BTreeMap<Rank, usize>);

impl RankCounter {
    fn add(&mut self, r: Rank) {
        *self.0.entry(r).or_default() += 1;
    }

    fn remove(&mut self, r: Rank) {
        if let Some(n) = self.0.get_mut(&r) {
            *n -= 1;
            if *n == 0 {
                self.0.remove(&r);
            }
        }
    }

    fn max(&self) -> Rank {
        self.0.keys().next_back().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ServerState {
    wait_queue: VecDeque<QueuedRequest>,
    running: Vec<Decoding>,
    current: Option<Batch>,
    busy_until: f64,
    queued_tokens: u64,
    queued_ranks: RankCounter,
    running_ranks: RankCounter,
    running_context: u64,
    strict_priority: bool,
    decode_owed: bool,
}

impl ServerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// With strict priority a decode iteration runs only when nothing is
    /// queued. Otherwise pending decodes get one iteration after every
    /// prefill batch.
    pub fn with_strict_priority(strict: bool) -> Self {
        Self {
            strict_priority: strict,
            ..Self::default()
        }
    }

    pub fn is_busy(&self) -> bool {
        self.current.is_some()
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    pub fn queue_len(&self) -> usize {
        self.wait_queue.len()
    }

    pub fn running(&self) -> &[Decoding] {
        &self.running
    }

    /// Requests in the prefill batch now executing, if any.
    pub fn current_prefill(&self) -> &[QueuedRequest] {
        match &self.current {
            Some(Batch::Prefill(b)) => b,
            _ => &[],
        }
    }

    pub fn resident_max_rank(&self) -> Rank {
        self.running_ranks.max()
    }

    pub fn enqueue(&mut self, q: QueuedRequest) {
        self.queued_tokens += u64::from(q.prompt);
        self.queued_ranks.add(q.rank);
        self.wait_queue.push_back(q);
    }

    fn dequeue(&mut self) -> Option<QueuedRequest> {
        let q = self.wait_queue.pop_front()?;
        self.queued_tokens -= u64::from(q.prompt);
        self.queued_ranks.remove(q.rank);
        Some(q)
    }

    pub fn start_decoding(&mut self, d: Decoding) {
        self.running_ranks.add(d.rank);
        self.running_context += d.context;
        self.running.push(d);
    }

    /// What the load-aware router sees at `now`.
    pub fn snapshot(&self, now: f64) -> ServerLoad {
        ServerLoad {
            busy_remaining: if self.is_busy() { (self.busy_until - now).max(0.0) } else { 0.0 },
            queued_tokens: self.queued_tokens,
            queued_requests: self.wait_queue.len(),
            queued_max_rank: self.queued_ranks.max(),
            resident_max_rank: self.running_ranks.max(),
        }
    }

    /// Picks the next batch for an idle server: a FIFO prefill batch up to
    /// the token budget if anything is queued, else one decode iteration over
    /// every running request. Unless priority is strict, a prefill batch is
    /// followed by one decode iteration when decodes are pending. Queued
    /// requests older than `timeout` are dropped while a prefill batch is
    /// formed.
    pub fn schedule(&mut self, now: f64, cost: &CostParams, timeout: f64) -> Decision {
        debug_assert!(!self.is_busy());
        if std::mem::take(&mut self.decode_owed) && !self.running.is_empty() {
            return self.start_decode(now, cost, Vec::new());
        }
        let budget = u64::from(cost.token_budget);
        let mut expired = Vec::new();
        let mut batch = Vec::new();
        let mut tokens = 0u64;
        while let Some(front) = self.wait_queue.front() {
            if now - front.arrival > timeout {
                expired.push(self.dequeue().expect("front exists"));
                continue;
            }
            if tokens + u64::from(front.prompt) > budget {
                break;
            }
            tokens += u64::from(front.prompt);
            batch.push(self.dequeue().expect("front exists"));
        }
        if !batch.is_empty() {
            let items: Vec<PrefillItem> = batch
                .iter()
                .map(|q| PrefillItem {
                    tokens: q.prompt,
                    rank: q.rank,
                })
                .collect();
            let duration = prefill_time(&items, self.running_ranks.max(), cost)
                .expect("prompts are checked against the token budget before the run");
            self.busy_until = now + duration;
            self.current = Some(Batch::Prefill(batch));
            self.decode_owed = !self.strict_priority;
            return Decision::Prefill { duration, expired };
        }
        if !self.running.is_empty() {
            return self.start_decode(now, cost, expired);
        }
        Decision::Idle { expired }
    }

    fn start_decode(&mut self, now: f64, cost: &CostParams, expired: Vec<QueuedRequest>) -> Decision {
        let duration = decode_seconds(self.running_context, self.running_ranks.max(), cost);
        self.busy_until = now + duration;
        self.current = Some(Batch::Decode);
        Decision::Decode { duration, expired }
    }

    /// Ends the executing batch. For a prefill batch returns its requests;
    /// for a decode iteration advances every running request by one token
    /// and returns `(idx, gap, finished)` per request.
    pub fn finish(&mut self, now: f64) -> Finished {
        match self.current.take() {
            Some(Batch::Prefill(batch)) => Finished::Prefill(batch),
            Some(Batch::Decode) => {
                let mut out = Vec::with_capacity(self.running.len());
                let mut keep = Vec::with_capacity(self.running.len());
                for mut d in std::mem::take(&mut self.running) {
                    let gap = now - d.last_token;
                    d.last_token = now;
                    d.remaining -= 1;
                    d.context += 1;
                    self.running_context += 1;
                    let done = d.remaining == 0;
                    out.push((d.idx, gap, done));
                    if done {
                        self.running_ranks.remove(d.rank);
                        self.running_context -= d.context;
                    } else {
                        keep.push(d);
                    }
                }
                self.running = keep;
                Finished::Decode(out)
            }
            None => Finished::Nothing,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Finished {
    Prefill(Vec<QueuedRequest>),
    Decode(Vec<(usize, f64, bool)>),
    Nothing,
}

/// Free-function form of [`ServerState::schedule`].
pub fn schedule_server(server: &mut ServerState, now: f64, cost: &CostParams, timeout: f64) -> Decision {
    server.schedule(now, cost, timeout)
}
