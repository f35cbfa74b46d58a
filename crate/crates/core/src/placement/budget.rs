use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PlacementError;
use crate::demand::DemandEstimate;
use crate::domain::{Adapter, OperatingPointTable, Rank};

/// Cluster utilization split by rank, in units of "servers at that rank's
/// operating point".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationLedger {
    pub target_util: f64,
    pub rank_util: BTreeMap<Rank, f64>,
    /// Assigned utilization per server, filled in by packing.
    pub per_server_load: Vec<f64>,
}

/// Integer servers dedicated to each rank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBudget {
    pub per_rank: BTreeMap<Rank, usize>,
}

impl RankBudget {
    pub fn total(&self) -> usize {
        self.per_rank.values().sum()
    }

    pub fn get(&self, rank: Rank) -> usize {
        self.per_rank.get(&rank).copied().unwrap_or(0)
    }
}

pub fn compute_utilization(
    demand: &DemandEstimate,
    adapters: &[Adapter],
    op_points: &OperatingPointTable,
    k: usize,
) -> Result<UtilizationLedger, PlacementError> {
    if k == 0 {
        return Err(PlacementError::NoServers);
    }
    let mut rank_tps: BTreeMap<Rank, f64> = BTreeMap::new();
    for a in adapters {
        let load = demand
            .get(&a.id)
            .ok_or_else(|| PlacementError::MissingDemand(a.id.clone()))?;
        *rank_tps.entry(a.rank).or_default() += load;
    }
    let mut rank_util = BTreeMap::new();
    let mut total = 0.0;
    for (rank, tps) in rank_tps {
        let cap = op_points
            .get(rank)
            .ok_or(PlacementError::MissingOperatingPoint(rank))?;
        let util = tps / cap;
        total += util;
        rank_util.insert(rank, util);
    }
    Ok(UtilizationLedger {
        target_util: total / k as f64,
        rank_util,
        per_server_load: vec![0.0; k],
    })
}

/// `round-half-up(rankUtil / targetUtil)` per rank, reconciled so the total
/// never exceeds `k`.
pub fn compute_rank_budgets(ledger: &UtilizationLedger, k: usize) -> RankBudget {
    if !(ledger.target_util > 0.0) {
        return RankBudget {
            per_rank: ledger.rank_util.keys().map(|&r| (r, 0)).collect(),
        };
    }
    let shares: Vec<(Rank, f64)> = ledger
        .rank_util
        .iter()
        .map(|(&r, &u)| (r, u / ledger.target_util))
        .collect();
    apportion(&shares, k)
}

/// Rounds each share half-up. If the rounded total exceeds `k`, falls back to
/// largest-remainder apportionment of `k` seats: floors first, then one extra
/// seat per rank in order of descending fractional part (ties to the lower
/// rank). A total below `k` is kept, leaving spare servers.
pub fn apportion(shares: &[(Rank, f64)], k: usize) -> RankBudget {
    let rounded: Vec<(Rank, usize)> = shares
        .iter()
        .map(|&(r, x)| (r, round_half_up(x)))
        .collect();
    if rounded.iter().map(|(_, n)| n).sum::<usize>() <= k {
        return RankBudget {
            per_rank: rounded.into_iter().collect(),
        };
    }

    let mut per_rank: BTreeMap<Rank, usize> = shares
        .iter()
        .map(|&(r, x)| (r, x.max(0.0).floor() as usize))
        .collect();
    let mut used: usize = per_rank.values().sum();
    let mut order: Vec<(Rank, f64)> = shares
        .iter()
        .map(|&(r, x)| (r, x.max(0.0) - x.max(0.0).floor()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (rank, _) in order {
        if used >= k {
            break;
        }
        *per_rank.get_mut(&rank).expect("present") += 1;
        used += 1;
    }
    // floors can only exceed k when the shares themselves overshoot k
    while used > k {
        let (&rank, _) = per_rank
            .iter()
            .filter(|(_, &n)| n > 0)
            .min_by(|a, b| {
                let fa = frac_of(shares, *a.0);
                let fb = frac_of(shares, *b.0);
                fa.total_cmp(&fb).then(b.0.cmp(a.0))
            })
            .expect("used > 0");
        *per_rank.get_mut(&rank).expect("present") -= 1;
        used -= 1;
    }
    RankBudget { per_rank }
}

fn frac_of(shares: &[(Rank, f64)], rank: Rank) -> f64 {
    shares
        .iter()
        .find(|(r, _)| *r == rank)
        .map_or(0.0, |(_, x)| x - x.floor())
}

fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        0
    } else {
        (x + 0.5).floor() as usize
    }
}
