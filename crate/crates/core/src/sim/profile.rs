//! Per-rank operating points measured on a simulated single server.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{run, SimConfig, SimError};
use crate::costmodel::{prefill_seconds, CostParams};
use crate::domain::{Adapter, DomainError, OperatingPointTable, Rank, Request};
use crate::metrics::slo_attained;
use crate::placement::PlacementPolicy;
use crate::routing::RouterKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub duration: f64,
    pub prompt: u32,
    pub output: u32,
    /// Relative width at which the search stops.
    pub tolerance: f64,
    pub timeout: f64,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            duration: 600.0,
            prompt: 512,
            output: 128,
            tolerance: 0.02,
            timeout: super::DEFAULT_TIMEOUT_SECONDS,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no ranks to profile")]
    NoRanks,
    #[error("SLO of {slo}s is not met for rank {rank} even at minimal load")]
    Unattainable { rank: Rank, slo: f64 },
    #[error("invalid profiling setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Prefill-only token throughput of one server at `rank`: full token-budget
/// batches back to back.
pub fn service_capacity(rank: Rank, prompt: u32, output: u32, cost: &CostParams) -> f64 {
    let per_batch = (cost.token_budget / prompt.max(1)).max(1);
    let secs = prefill_seconds(u64::from(per_batch) * u64::from(prompt), rank, cost);
    f64::from(per_batch) / secs * f64::from(prompt + output)
}

fn poisson_trace(rps: f64, cfg: &ProfileConfig, adapter: &Adapter) -> Vec<Request> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gap = Exp::new(rps).expect("rps > 0");
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(&mut rng);
        if t > cfg.duration {
            break;
        }
        out.push(Request {
            request_id: format!("p{}", out.len()),
            adapter: adapter.id.clone(),
            prompt_length: cfg.prompt,
            output_length: cfg.output,
            arrival_time: t,
        });
    }
    out
}

fn attains(tps: f64, rank: Rank, slo: f64, cfg: &ProfileConfig, cost: &CostParams) -> Result<bool, ProfileError> {
    let adapter = Adapter::new(format!("r{rank}"), rank, u64::from(rank) * 2 * 1024 * 1024)?;
    let rps = tps / f64::from(cfg.prompt + cfg.output);
    let trace = poisson_trace(rps, cfg, &adapter);
    let ops = OperatingPointTable::new([(rank, tps.max(f64::MIN_POSITIVE))].into())?;
    let sim = SimConfig {
        servers: 1,
        cost: cost.clone(),
        timeout: if slo.is_finite() { cfg.timeout.max(slo) } else { f64::INFINITY },
        rebalance_window: cfg.duration * 2.0,
        ..SimConfig::default()
    };
    let result = run(
        &trace,
        std::slice::from_ref(&adapter),
        &ops,
        PlacementPolicy::Contiguous,
        RouterKind::Table,
        &sim,
        cfg.seed,
    )?;
    Ok(slo_attained(&result, slo).attained)
}

/// Largest offered tokens/s per rank at which a lone server keeps P95 TTFT
/// within `slo`. Found by bisection between 1% of the prefill-only capacity
/// and the capacity itself, then clamped to be non-increasing in rank.
pub fn profile_operating_points(
    cfg: &ProfileConfig,
    cost: &CostParams,
    slo: f64,
    ranks: &[Rank],
) -> Result<OperatingPointTable, ProfileError> {
    if ranks.is_empty() {
        return Err(ProfileError::NoRanks);
    }
    if !(slo > 0.0) || cfg.prompt == 0 || cfg.output == 0 || cfg.prompt > cost.token_budget {
        return Err(ProfileError::Invalid(format!(
            "slo {slo}, prompt {}, output {}, budget {}",
            cfg.prompt, cfg.output, cost.token_budget
        )));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let mut table = BTreeMap::new();
    let mut ceiling = f64::INFINITY;
    for rank in sorted {
        let mut hi = service_capacity(rank, cfg.prompt, cfg.output, cost);
        let mut lo = hi / 100.0;
        if !attains(lo, rank, slo, cfg, cost)? {
            return Err(ProfileError::Unattainable { rank, slo });
        }
        if attains(hi, rank, slo, cfg, cost)? {
            lo = hi;
        }
        while (hi - lo) / lo > cfg.tolerance {
            let mid = (lo * hi).sqrt();
            if attains(mid, rank, slo, cfg, cost)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        ceiling = ceiling.min(lo);
        table.insert(rank, ceiling);
    }
    Ok(OperatingPointTable::new(table)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ProfileConfig {
        ProfileConfig {
            duration: 300.0,
            ..ProfileConfig::default()
        }
    }

    #[test]
    fn higher_rank_has_lower_capacity() {
        let t = profile_operating_points(&quick(), &CostParams::default(), 10.0, &[8, 128]).unwrap();
        assert!(t.get(8).unwrap() > t.get(128).unwrap());
    }

    #[test]
    fn unbounded_slo_reaches_service_capacity() {
        let cost = CostParams::default();
        let t = profile_operating_points(&quick(), &cost, f64::INFINITY, &[8]).unwrap();
        let cap = service_capacity(8, 512, 128, &cost);
        assert!(t.get(8).unwrap() <= cap * (1.0 + 1e-12));
        assert!(t.get(8).unwrap() >= cap * 0.98);
    }

    #[test]
    fn empty_rank_list_is_rejected() {
        assert!(matches!(
            profile_operating_points(&quick(), &CostParams::default(), 10.0, &[]),
            Err(ProfileError::NoRanks)
        ));
    }

    #[test]
    fn impossible_slo_is_reported() {
        let err = profile_operating_points(&quick(), &CostParams::default(), 0.01, &[8]).unwrap_err();
        assert!(matches!(err, ProfileError::Unattainable { rank: 8, .. }));
    }
}
