//! Distributed adapter pool: which servers hold which adapters in host
//! memory, GPU slot residency, fetch planning and migration commits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{fetch_latency, CostParams, FetchSource};
use crate::domain::{Adapter, AdapterId, Assignment, RoutingTable, ServerId};

pub const DEFAULT_GPU_SLOTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("adapter {0} is not registered with the pool")]
    UnknownAdapter(AdapterId),
    #[error("server {0} is outside the cluster")]
    UnknownServer(ServerId),
    #[error("adapter {0} has no holder")]
    Uncovered(AdapterId),
}

/// Adapter id → servers holding it in host memory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLocationTable {
    pub locations: BTreeMap<AdapterId, BTreeSet<ServerId>>,
}

impl AdapterLocationTable {
    pub fn holders(&self, adapter: &AdapterId) -> Option<&BTreeSet<ServerId>> {
        self.locations.get(adapter)
    }

    /// Adapters held by `server`.
    pub fn resident_on(&self, server: ServerId) -> usize {
        self.locations.values().filter(|h| h.contains(&server)).count()
    }
}

pub fn lookup<'a>(table: &'a AdapterLocationTable, adapter: &AdapterId) -> Result<&'a BTreeSet<ServerId>, PoolError> {
    table
        .holders(adapter)
        .filter(|h| !h.is_empty())
        .ok_or_else(|| PoolError::UnknownAdapter(adapter.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FetchKind {
    AlreadyLocal,
    LoadFromHost,
    FetchRemote { source: ServerId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FetchPlan {
    pub kind: FetchKind,
    pub bytes: u64,
    pub latency: f64,
}

/// Per-server LRU set of adapters loaded into GPU memory.
#[derive(Clone, Debug, Default, PartialEq)]
struct GpuSlots {
    capacity: usize,
    order: VecDeque<AdapterId>,
}

impl GpuSlots {
    fn contains(&self, a: &AdapterId) -> bool {
        self.order.contains(a)
    }

    fn touch(&mut self, a: &AdapterId) {
        if let Some(i) = self.order.iter().position(|x| x == a) {
            self.order.remove(i);
        }
        self.order.push_back(a.clone());
        while self.order.len() > self.capacity.max(1) {
            self.order.pop_front();
        }
    }

    fn remove(&mut self, a: &AdapterId) {
        self.order.retain(|x| x != a);
    }
}

/// The pool as the simulator mutates it. Holders that are still serving
/// admitted requests (or acting as a fetch source) are pinned and only
/// evicted once released.
#[derive(Clone, Debug)]
pub struct AdapterPool {
    table: AdapterLocationTable,
    sizes: BTreeMap<AdapterId, u64>,
    gpu: Vec<GpuSlots>,
    pins: BTreeMap<(ServerId, AdapterId), u32>,
    peak_resident: Vec<usize>,
    evictions: u64,
}

impl AdapterPool {
    /// Seeds each adapter on the servers where `initial` gives it φ > 0
    /// (server 0 if it appears nowhere).
    pub fn new(k: usize, adapters: &[Adapter], initial: &Assignment, gpu_slots: usize) -> Self {
        let mut locations: BTreeMap<AdapterId, BTreeSet<ServerId>> =
            adapters.iter().map(|a| (a.id.clone(), BTreeSet::new())).collect();
        for (s, id, phi) in initial.triples() {
            if phi > 0.0 {
                if let Some(h) = locations.get_mut(id) {
                    h.insert(s);
                }
            }
        }
        for h in locations.values_mut() {
            if h.is_empty() {
                h.insert(ServerId(0));
            }
        }
        let mut pool = Self {
            table: AdapterLocationTable { locations },
            sizes: adapters.iter().map(|a| (a.id.clone(), a.size_bytes)).collect(),
            gpu: vec![
                GpuSlots {
                    capacity: gpu_slots,
                    order: VecDeque::new(),
                };
                k
            ],
            pins: BTreeMap::new(),
            peak_resident: vec![0; k],
            evictions: 0,
        };
        pool.note_footprint();
        pool
    }

    pub fn table(&self) -> &AdapterLocationTable {
        &self.table
    }

    pub fn num_servers(&self) -> usize {
        self.gpu.len()
    }

    pub fn lookup(&self, adapter: &AdapterId) -> Result<&BTreeSet<ServerId>, PoolError> {
        lookup(&self.table, adapter)
    }

    pub fn holds(&self, server: ServerId, adapter: &AdapterId) -> bool {
        self.table.holders(adapter).is_some_and(|h| h.contains(&server))
    }

    pub fn size_of(&self, adapter: &AdapterId) -> Result<u64, PoolError> {
        self.sizes
            .get(adapter)
            .copied()
            .ok_or_else(|| PoolError::UnknownAdapter(adapter.clone()))
    }

    pub fn gpu_resident(&self, server: ServerId, adapter: &AdapterId) -> bool {
        self.gpu.get(server.0).is_some_and(|g| g.contains(adapter))
    }

    /// Marks `adapter` as loaded on `server`'s GPU, evicting the least
    /// recently used slot if full.
    pub fn touch_gpu(&mut self, server: ServerId, adapter: &AdapterId) {
        if let Some(g) = self.gpu.get_mut(server.0) {
            g.touch(adapter);
        }
    }

    /// How `target` gets `adapter`. A remote fetch reads from the holder
    /// with the least `load` (ties to the lowest index).
    pub fn plan_fetch(&self, adapter: &AdapterId, target: ServerId, load: &[f64], cost: &CostParams) -> Result<FetchPlan, PoolError> {
        if target.0 >= self.num_servers() {
            return Err(PoolError::UnknownServer(target));
        }
        let holders = self.lookup(adapter)?;
        let bytes = self.size_of(adapter)?;
        let latency = |src| fetch_latency(bytes, src, cost).unwrap_or(0.0);
        if holders.contains(&target) {
            if self.gpu_resident(target, adapter) {
                return Ok(FetchPlan {
                    kind: FetchKind::AlreadyLocal,
                    bytes,
                    latency: 0.0,
                });
            }
            return Ok(FetchPlan {
                kind: FetchKind::LoadFromHost,
                bytes,
                latency: latency(FetchSource::Host),
            });
        }
        let source = holders
            .iter()
            .copied()
            .min_by(|x, y| {
                let lx = load.get(x.0).copied().unwrap_or(0.0);
                let ly = load.get(y.0).copied().unwrap_or(0.0);
                lx.total_cmp(&ly).then(x.cmp(y))
            })
            .ok_or_else(|| PoolError::Uncovered(adapter.clone()))?;
        Ok(FetchPlan {
            kind: FetchKind::FetchRemote { source },
            bytes,
            latency: latency(FetchSource::RemoteRdma),
        })
    }

    pub fn pin(&mut self, server: ServerId, adapter: &AdapterId) {
        *self.pins.entry((server, adapter.clone())).or_default() += 1;
    }

    /// Releases one pin and evicts the copy if it has gone stale meanwhile.
    pub fn unpin(&mut self, server: ServerId, adapter: &AdapterId, routing: &RoutingTable) {
        let key = (server, adapter.clone());
        if let Some(n) = self.pins.get_mut(&key) {
            *n -= 1;
            if *n == 0 {
                self.pins.remove(&key);
                self.evict_stale(adapter, routing);
            }
        }
    }

    pub fn is_pinned(&self, server: ServerId, adapter: &AdapterId) -> bool {
        self.pins.contains_key(&(server, adapter.clone()))
    }

    /// Records a completed fetch of `adapter` to `target`, then drops stale
    /// holders.
    pub fn commit_migration(&mut self, adapter: &AdapterId, target: ServerId, routing: &RoutingTable) -> Result<(), PoolError> {
        if target.0 >= self.num_servers() {
            return Err(PoolError::UnknownServer(target));
        }
        self.table
            .locations
            .get_mut(adapter)
            .ok_or_else(|| PoolError::UnknownAdapter(adapter.clone()))?
            .insert(target);
        self.touch_gpu(target, adapter);
        self.evict_stale(adapter, routing);
        self.note_footprint();
        Ok(())
    }

    /// Removes holders that have φ = 0 for `adapter` under `routing` and are
    /// not pinned, never emptying the holder set. Returns how many copies
    /// were dropped.
    pub fn evict_stale(&mut self, adapter: &AdapterId, routing: &RoutingTable) -> usize {
        let Some(holders) = self.table.locations.get(adapter) else {
            return 0;
        };
        let stale: Vec<ServerId> = holders
            .iter()
            .copied()
            .filter(|&s| routing.phi(adapter, s) <= 0.0 && !self.pins.contains_key(&(s, adapter.clone())))
            .collect();
        let mut dropped = 0;
        for s in stale {
            let holders = self.table.locations.get_mut(adapter).expect("checked above");
            if holders.len() <= 1 {
                break;
            }
            holders.remove(&s);
            if let Some(g) = self.gpu.get_mut(s.0) {
                g.remove(adapter);
            }
            dropped += 1;
        }
        self.evictions += dropped as u64;
        dropped
    }

    pub fn resident_count(&self, server: ServerId) -> usize {
        self.table.resident_on(server)
    }

    pub fn peak_resident(&self) -> &[usize] {
        &self.peak_resident
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    fn note_footprint(&mut self) {
        let mut counts = vec![0usize; self.num_servers()];
        for h in self.table.locations.values() {
            for s in h {
                if let Some(c) = counts.get_mut(s.0) {
                    *c += 1;
                }
            }
        }
        for (peak, c) in self.peak_resident.iter_mut().zip(counts) {
            *peak = (*peak).max(c);
        }
    }

    /// Every registered adapter has at least one holder inside the cluster.
    pub fn check_coverage(&self) -> Result<(), PoolError> {
        let k = self.num_servers();
        for (a, h) in &self.table.locations {
            if h.is_empty() {
                return Err(PoolError::Uncovered(a.clone()));
            }
            if let Some(s) = h.iter().find(|s| s.0 >= k) {
                return Err(PoolError::UnknownServer(*s));
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdapterPool::plan_fetch`] over a bare table with
/// every holder treated as host-resident and nothing on the GPU.
pub fn plan_fetch(
    table: &AdapterLocationTable,
    adapter: &AdapterId,
    bytes: u64,
    target: ServerId,
    load: &[f64],
    cost: &CostParams,
) -> Result<FetchPlan, PoolError> {
    let holders = lookup(table, adapter)?;
    if holders.contains(&target) {
        return Ok(FetchPlan {
            kind: FetchKind::LoadFromHost,
            bytes,
            latency: fetch_latency(bytes, FetchSource::Host, cost).unwrap_or(0.0),
        });
    }
    let source = holders
        .iter()
        .copied()
        .min_by(|x, y| {
            let lx = load.get(x.0).copied().unwrap_or(0.0);
            let ly = load.get(y.0).copied().unwrap_or(0.0);
            lx.total_cmp(&ly).then(x.cmp(y))
        })
        .ok_or_else(|| PoolError::Uncovered(adapter.clone()))?;
    Ok(FetchPlan {
        kind: FetchKind::FetchRemote { source },
        bytes,
        latency: fetch_latency(bytes, FetchSource::RemoteRdma, cost).unwrap_or(0.0),
    })
}

/// Free-function form of [`AdapterPool::commit_migration`] over a bare table
/// with no pins.
pub fn commit_migration(
    table: &AdapterLocationTable,
    adapter: &AdapterId,
    target: ServerId,
    routing: &RoutingTable,
) -> Result<AdapterLocationTable, PoolError> {
    let mut out = table.clone();
    let holders = out
        .locations
        .get_mut(adapter)
        .ok_or_else(|| PoolError::UnknownAdapter(adapter.clone()))?;
    holders.insert(target);
    let stale: Vec<ServerId> = holders
        .iter()
        .copied()
        .filter(|&s| routing.phi(adapter, s) <= 0.0)
        .collect();
    for s in stale {
        if holders.len() <= 1 {
            break;
        }
        holders.remove(&s);
    }
    Ok(out)
}
