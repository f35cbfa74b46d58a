//! Rank-aware adapter placement and the static baseline placements.

mod budget;
mod packing;
mod permute;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use budget::{apportion, compute_rank_budgets, compute_utilization, RankBudget, UtilizationLedger};
pub use packing::{allocate_leftovers, fractional_bin_pack, Leftover, LeftoverItem, PackOutcome, PlacementDraft};
pub use permute::{matching_weight, max_weight_matching, overlap_matrix, permute_assignment};

use crate::demand::{DemandEstimate, TpsHistory};
use crate::domain::{Adapter, AdapterId, Assignment, DomainError, OperatingPointTable, Rank, ServerId};

#[derive(Debug, Error, PartialEq)]
pub enum PlacementError {
    #[error("no operating point for rank {0}")]
    MissingOperatingPoint(Rank),
    #[error("no demand estimate for adapter {0}")]
    MissingDemand(AdapterId),
    #[error("cluster has no servers")]
    NoServers,
    #[error("previous assignment spans {got} servers, expected {expected}")]
    ServerCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementPolicy {
    /// Rank-aware packing, recomputed every rebalance epoch.
    #[serde(rename = "loraserve")]
    RankAware,
    Random,
    Contiguous,
    /// Every adapter on every server with equal φ.
    Replicate,
}

impl PlacementPolicy {
    pub const NAMES: [&'static str; 4] = ["loraserve", "random", "contiguous", "replicate"];

    pub fn name(self) -> &'static str {
        match self {
            Self::RankAware => "loraserve",
            Self::Random => "random",
            Self::Contiguous => "contiguous",
            Self::Replicate => "replicate",
        }
    }

    /// Static policies are computed once at t=0 and never rebalanced.
    pub fn is_dynamic(self) -> bool {
        matches!(self, Self::RankAware)
    }
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlacementPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "loraserve" => Ok(Self::RankAware),
            "random" => Ok(Self::Random),
            "contiguous" => Ok(Self::Contiguous),
            "replicate" => Ok(Self::Replicate),
            _ => Err(format!(
                "unknown placement policy {s:?}; expected one of: {}",
                Self::NAMES.join(", ")
            )),
        }
    }
}

/// Everything one run of the rank-aware placement produced.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementOutcome {
    pub assignment: Assignment,
    pub ledger: UtilizationLedger,
    pub budget: RankBudget,
    pub leftovers: Vec<Leftover>,
}

/// Rank-aware placement driven by a demand history.
pub fn place(
    k: usize,
    adapters: &[Adapter],
    history: &TpsHistory,
    op_points: &OperatingPointTable,
    previous: &Assignment,
) -> Result<Assignment, PlacementError> {
    place_with_demand(k, adapters, &history.estimate(), op_points, previous).map(|o| o.assignment)
}

/// Rank-aware placement from an explicit per-adapter demand estimate.
pub fn place_with_demand(
    k: usize,
    adapters: &[Adapter],
    demand: &DemandEstimate,
    op_points: &OperatingPointTable,
    previous: &Assignment,
) -> Result<PlacementOutcome, PlacementError> {
    if !previous.is_empty() && previous.num_servers() != k {
        return Err(PlacementError::ServerCountMismatch {
            expected: k,
            got: previous.num_servers(),
        });
    }
    let mut ledger = compute_utilization(demand, adapters, op_points, k)?;
    let budget = compute_rank_budgets(&ledger, k);

    let mut by_rank: BTreeMap<Rank, Vec<&Adapter>> = BTreeMap::new();
    for a in adapters {
        by_rank.entry(a.rank).or_default().push(a);
    }
    let rank_of: BTreeMap<&AdapterId, (Rank, f64, f64)> = adapters
        .iter()
        .map(|a| {
            let tps = demand.get(&a.id).unwrap_or(0.0);
            let cap = op_points.get(a.rank).expect("checked by compute_utilization");
            (&a.id, (a.rank, tps / cap, tps))
        })
        .collect();

    let mut draft = PlacementDraft::new(k);
    let mut leftovers = Vec::new();
    let mut next_server = 0;
    for (&rank, members) in &by_rank {
        let n = budget.get(rank).min(k - next_server);
        let servers: Vec<ServerId> = (next_server..next_server + n).map(ServerId).collect();
        next_server += n;
        let items: Vec<(AdapterId, f64)> = members.iter().map(|a| (a.id.clone(), rank_of[&a.id].1)).collect();
        let packed = fractional_bin_pack(&items, &servers, ledger.target_util);
        for (server, adapter, phi) in &packed.placed {
            let (r, util, tps) = rank_of[adapter];
            draft.add(*server, adapter, r, *phi, phi * util, phi * tps);
        }
        leftovers.extend(packed.leftovers);
    }

    let items: Vec<LeftoverItem> = leftovers
        .iter()
        .map(|l| {
            let (rank, util, tps) = rank_of[&l.adapter];
            LeftoverItem {
                adapter: l.adapter.clone(),
                rank,
                phi: l.phi,
                util: l.phi * util,
                tps: l.phi * tps,
            }
        })
        .collect();
    allocate_leftovers(&items, &mut draft, ledger.target_util, op_points);

    let fresh = draft.into_assignment(previous.generation + 1)?;
    let assignment = permute_assignment(&fresh, previous, demand);
    ledger.per_server_load = assignment
        .bundles()
        .iter()
        .map(|b| b.iter().map(|(a, phi)| phi * rank_of[a].1).sum())
        .collect();
    Ok(PlacementOutcome {
        assignment,
        ledger,
        budget,
        leftovers,
    })
}

/// Shuffles adapters with a seeded RNG and deals them round-robin.
pub fn place_random(k: usize, adapters: &[Adapter], seed: u64) -> Result<Assignment, PlacementError> {
    if k == 0 {
        return Err(PlacementError::NoServers);
    }
    let mut ids: Vec<&AdapterId> = adapters.iter().map(|a| &a.id).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut per_server = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        per_server[i % k].push((id.clone(), 1.0));
    }
    Ok(Assignment::new(per_server, 0)?)
}

/// Sorts adapters by rank (ties by id) and cuts them into `k` contiguous
/// slices, the first `N mod k` slices one larger.
pub fn place_contiguous(k: usize, adapters: &[Adapter]) -> Result<Assignment, PlacementError> {
    if k == 0 {
        return Err(PlacementError::NoServers);
    }
    let mut sorted: Vec<&Adapter> = adapters.iter().collect();
    sorted.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| a.id.cmp(&b.id)));
    let (base, extra) = (sorted.len() / k, sorted.len() % k);
    let mut per_server = Vec::with_capacity(k);
    let mut it = sorted.into_iter();
    for s in 0..k {
        let take = base + usize::from(s < extra);
        per_server.push(it.by_ref().take(take).map(|a| (a.id.clone(), 1.0)).collect());
    }
    Ok(Assignment::new(per_server, 0)?)
}

/// Every adapter on every server with φ = 1/k.
pub fn place_replicate(k: usize, adapters: &[Adapter]) -> Result<Assignment, PlacementError> {
    if k == 0 {
        return Err(PlacementError::NoServers);
    }
    let phi = 1.0 / k as f64;
    let bundle: Vec<(AdapterId, f64)> = adapters.iter().map(|a| (a.id.clone(), phi)).collect();
    Ok(Assignment::new(vec![bundle; k], 0)?)
}

/// Initial placement for `policy`, using uniform floor demand for the
/// rank-aware policy.
pub fn initial_placement(
    policy: PlacementPolicy,
    k: usize,
    adapters: &[Adapter],
    op_points: &OperatingPointTable,
    floor: f64,
    seed: u64,
) -> Result<Assignment, PlacementError> {
    match policy {
        PlacementPolicy::RankAware => {
            let demand = DemandEstimate::uniform(adapters.iter().map(|a| &a.id), floor);
            Ok(place_with_demand(k, adapters, &demand, op_points, &Assignment::empty(k))?.assignment)
        }
        PlacementPolicy::Random => place_random(k, adapters, seed),
        PlacementPolicy::Contiguous => place_contiguous(k, adapters),
        PlacementPolicy::Replicate => place_replicate(k, adapters),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ops() -> OperatingPointTable {
        OperatingPointTable::new([(8, 2000.0), (16, 1800.0), (32, 1500.0), (64, 1200.0), (128, 1000.0)].into())
            .unwrap()
    }

    fn adapters(items: &[(&str, Rank)]) -> Vec<Adapter> {
        items.iter().map(|&(id, r)| Adapter::new(id, r, 1).unwrap()).collect()
    }

    fn demand(items: &[(&str, f64)]) -> DemandEstimate {
        DemandEstimate {
            per_adapter: items.iter().map(|&(id, l)| (AdapterId::from(id), l)).collect(),
        }
    }

    fn phi_sums(a: &Assignment) -> BTreeMap<AdapterId, f64> {
        let mut sums = BTreeMap::new();
        for (_, id, phi) in a.triples() {
            *sums.entry(id.clone()).or_insert(0.0) += phi;
        }
        sums
    }

    #[test]
    fn two_rank_cluster_stays_homogeneous() {
        let ad = adapters(&[("a", 8), ("b", 8), ("c", 128), ("d", 128)]);
        let d = demand(&[("a", 1200.0), ("b", 800.0), ("c", 600.0), ("d", 400.0)]);
        let ops = OperatingPointTable::new([(8, 2000.0), (128, 1000.0)].into()).unwrap();
        let out = place_with_demand(4, &ad, &d, &ops, &Assignment::empty(4)).unwrap();
        assert_eq!(out.budget.per_rank, [(8, 2), (128, 2)].into());
        assert!(out.leftovers.is_empty());
        for bundle in out.assignment.bundles() {
            let ranks: BTreeSet<Rank> = bundle
                .iter()
                .map(|(id, _)| ad.iter().find(|a| &a.id == id).unwrap().rank)
                .collect();
            assert_eq!(ranks.len(), 1);
        }
    }

    #[test]
    fn uniform_one_rank_spreads_evenly() {
        let names: Vec<String> = (0..12).map(|i| format!("a{i:02}")).collect();
        let ad: Vec<Adapter> = names.iter().map(|n| Adapter::new(n.as_str(), 16, 1).unwrap()).collect();
        let d = DemandEstimate::uniform(ad.iter().map(|a| &a.id), 300.0);
        let out = place_with_demand(4, &ad, &d, &ops(), &Assignment::empty(4)).unwrap();
        let loads = &out.ledger.per_server_load;
        let spread = loads.iter().cloned().fold(f64::MIN, f64::max) - loads.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread <= 300.0 / 1800.0 + 1e-9, "{loads:?}");
    }

    #[test]
    fn fixed_point_keeps_labels() {
        let ad = adapters(&[("a", 8), ("b", 16), ("c", 32), ("d", 64), ("e", 128), ("f", 8)]);
        let d = demand(&[("a", 900.0), ("b", 400.0), ("c", 300.0), ("d", 700.0), ("e", 100.0), ("f", 50.0)]);
        let first = place_with_demand(3, &ad, &d, &ops(), &Assignment::empty(3)).unwrap().assignment;
        let second = place_with_demand(3, &ad, &d, &ops(), &first).unwrap().assignment;
        assert_eq!(first.bundles(), second.bundles());
        assert_eq!(second.generation, first.generation + 1);
    }

    #[test]
    fn random_deals_evenly_and_deterministically() {
        let ad = adapters(&[("a", 8), ("b", 8), ("c", 8), ("d", 8)]);
        let x = place_random(2, &ad, 7).unwrap();
        assert!(x.bundles().iter().all(|b| b.len() == 2));
        assert_eq!(x, place_random(2, &ad, 7).unwrap());
        assert_eq!(place_random(1, &ad, 7).unwrap().bundle(ServerId(0)).len(), 4);
    }

    #[test]
    fn contiguous_slices_by_rank() {
        let ad = adapters(&[("w", 128), ("x", 8), ("y", 64), ("z", 8)]);
        let a = place_contiguous(2, &ad).unwrap();
        let names = |s| a.bundle(ServerId(s)).iter().map(|(id, _)| id.as_str().to_owned()).collect::<Vec<_>>();
        assert_eq!(names(0), vec!["x", "z"]);
        assert_eq!(names(1), vec!["w", "y"]);

        let five = adapters(&[("a", 8), ("b", 8), ("c", 8), ("d", 8), ("e", 8)]);
        let a = place_contiguous(2, &five).unwrap();
        assert_eq!(a.bundle(ServerId(0)).len(), 3);
        assert_eq!(a.bundle(ServerId(1)).len(), 2);
    }

    #[test]
    fn replicate_covers_everything() {
        let ad = adapters(&[("a", 8), ("b", 64)]);
        let a = place_replicate(4, &ad).unwrap();
        assert!(a.bundles().iter().all(|b| b.len() == 2));
        assert!(phi_sums(&a).values().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn policy_names_round_trip() {
        for name in PlacementPolicy::NAMES {
            assert_eq!(name.parse::<PlacementPolicy>().unwrap().name(), name);
        }
        let err = "bogus".parse::<PlacementPolicy>().unwrap_err();
        assert!(err.contains("loraserve") && err.contains("contiguous"));
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(Rank, f64)>)> {
        let ranks = prop::sample::select(vec![8u32, 16, 32, 64, 128]);
        (1usize..=8, prop::collection::vec((ranks, 0.0f64..5000.0), 1..40))
    }

    proptest! {
        #[test]
        fn every_policy_covers_every_adapter((k, items) in instance(), seed in any::<u64>()) {
            let ad: Vec<Adapter> = items.iter().enumerate()
                .map(|(i, &(r, _))| Adapter::new(format!("a{i:03}"), r, 1).unwrap())
                .collect();
            let d = DemandEstimate {
                per_adapter: ad.iter().zip(&items).map(|(a, &(_, l))| (a.id.clone(), l.max(1.0))).collect(),
            };
            let out = place_with_demand(k, &ad, &d, &ops(), &Assignment::empty(k)).unwrap();
            prop_assert!(out.budget.total() <= k);
            for a in [out.assignment.clone(), place_random(k, &ad, seed).unwrap(), place_contiguous(k, &ad).unwrap()] {
                let sums = phi_sums(&a);
                prop_assert_eq!(sums.len(), ad.len());
                for s in sums.values() {
                    prop_assert!((s - 1.0).abs() <= 1e-9);
                }
                prop_assert!(a.to_routing_table().validate_against(&ad).is_empty());
            }
            let again = place_with_demand(k, &ad, &d, &ops(), &out.assignment).unwrap();
            prop_assert_eq!(again.assignment.bundles(), out.assignment.bundles());
        }
    }
}
