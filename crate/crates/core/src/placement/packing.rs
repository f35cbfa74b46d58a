//! Fractional bin packing of one rank's adapters and re-homing of whatever
//! did not fit.

use serde::{Deserialize, Serialize};

use crate::domain::{AdapterId, Assignment, DomainError, OperatingPointTable, Rank, ServerId};

/// Remainders below this φ are folded into the previous piece.
const PHI_EPS: f64 = 1e-12;
/// Relative slack when testing whether a piece fits under capacity.
const FIT_SLACK: f64 = 1e-9;

/// Part of an adapter's traffic that packing could not place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leftover {
    pub adapter: AdapterId,
    pub phi: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PackOutcome {
    /// `(server, adapter, phi)` pieces in placement order.
    pub placed: Vec<(ServerId, AdapterId, f64)>,
    pub leftovers: Vec<Leftover>,
    /// Utilization assigned to each input server, same order as the input.
    pub server_load: Vec<(ServerId, f64)>,
}

/// Packs `(adapter, utilization)` items into `servers`, each holding at most
/// `capacity`, splitting an adapter across consecutive servers when it
/// straddles a boundary. Items go in descending utilization (ties by id).
pub fn fractional_bin_pack(items: &[(AdapterId, f64)], servers: &[ServerId], capacity: f64) -> PackOutcome {
    let mut order: Vec<&(AdapterId, f64)> = items.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut out = PackOutcome {
        server_load: servers.iter().map(|&s| (s, 0.0)).collect(),
        ..PackOutcome::default()
    };
    if servers.is_empty() || !(capacity > 0.0) {
        out.leftovers = order
            .into_iter()
            .map(|(a, _)| Leftover {
                adapter: a.clone(),
                phi: 1.0,
            })
            .collect();
        return out;
    }

    let mut idx = 0;
    for (adapter, util) in order {
        let mut phi_left = 1.0;
        if *util <= 0.0 && idx < servers.len() {
            // zero-demand adapters ride along on the current server
            out.placed.push((servers[idx], adapter.clone(), 1.0));
            continue;
        }
        while phi_left > 0.0 && idx < servers.len() {
            let room = capacity - out.server_load[idx].1;
            if room <= capacity * FIT_SLACK {
                idx += 1;
                continue;
            }
            let mut take = (room / util).min(phi_left);
            if phi_left - take < PHI_EPS {
                take = phi_left;
            }
            out.placed.push((servers[idx], adapter.clone(), take));
            out.server_load[idx].1 += take * util;
            phi_left -= take;
            if phi_left <= 0.0 {
                phi_left = 0.0;
            }
        }
        if phi_left > 0.0 && phi_left < PHI_EPS {
            if let Some(last) = out.placed.last_mut().filter(|p| &p.1 == adapter) {
                last.2 += phi_left;
                phi_left = 0.0;
            }
        }
        if phi_left > 0.0 {
            out.leftovers.push(Leftover {
                adapter: adapter.clone(),
                phi: phi_left,
            });
        }
    }
    out
}

/// Mutable per-server state while an assignment is being assembled.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacementDraft {
    bundles: Vec<Vec<(AdapterId, f64)>>,
    /// Nominal utilization: each piece at its own rank's operating point.
    load: Vec<f64>,
    /// Projected tokens/s routed to the server.
    tps: Vec<f64>,
    max_rank: Vec<Rank>,
}

impl PlacementDraft {
    pub fn new(k: usize) -> Self {
        Self {
            bundles: vec![Vec::new(); k],
            load: vec![0.0; k],
            tps: vec![0.0; k],
            max_rank: vec![0; k],
        }
    }

    pub fn num_servers(&self) -> usize {
        self.bundles.len()
    }

    /// Adds `phi` of `adapter` to `server`, merging with an existing piece.
    pub fn add(&mut self, server: ServerId, adapter: &AdapterId, rank: Rank, phi: f64, util: f64, tps: f64) {
        let s = server.0;
        match self.bundles[s].iter_mut().find(|(a, _)| a == adapter) {
            Some(entry) => entry.1 += phi,
            None => self.bundles[s].push((adapter.clone(), phi)),
        }
        self.load[s] += util;
        self.tps[s] += tps;
        self.max_rank[s] = self.max_rank[s].max(rank);
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    pub fn max_rank(&self, server: ServerId) -> Rank {
        self.max_rank[server.0]
    }

    pub fn is_empty_server(&self, server: ServerId) -> bool {
        self.bundles[server.0].is_empty()
    }

    /// Load of `server` when everything on it runs at its maximum rank.
    pub fn effective_load(&self, server: ServerId, op_points: &OperatingPointTable) -> f64 {
        effective(self.tps[server.0], self.max_rank[server.0], op_points)
    }

    pub fn into_assignment(self, generation: u64) -> Result<Assignment, DomainError> {
        Assignment::new(self.bundles, generation)
    }
}

fn effective(tps: f64, max_rank: Rank, op_points: &OperatingPointTable) -> f64 {
    match op_points.at_least(max_rank) {
        Some(cap) => tps / cap,
        None => 0.0,
    }
}

/// A leftover with what allocation needs to know about it.
#[derive(Clone, Debug, PartialEq)]
pub struct LeftoverItem {
    pub adapter: AdapterId,
    pub rank: Rank,
    pub phi: f64,
    /// Utilization of the residual at the adapter's own rank.
    pub util: f64,
    /// Projected tokens/s of the residual.
    pub tps: f64,
}

/// Re-homes leftovers, highest rank first. Each residual goes whole to:
///
/// 1. a non-empty server whose max rank is at least the leftover's and that
///    still has room: highest max rank, then least loaded, then lowest index;
/// 2. otherwise an empty server, lowest index first;
/// 3. otherwise a lower-max-rank server with room once it is re-priced at the
///    leftover's rank: smallest resulting load;
/// 4. otherwise the server with the smallest resulting effective load.
///
/// "Room" is measured on effective load (every piece priced at the server's
/// max rank) against `capacity`.
pub fn allocate_leftovers(
    leftovers: &[LeftoverItem],
    draft: &mut PlacementDraft,
    capacity: f64,
    op_points: &OperatingPointTable,
) {
    let mut order: Vec<&LeftoverItem> = leftovers.iter().collect();
    order.sort_by(|a, b| b.rank.cmp(&a.rank).then_with(|| a.adapter.cmp(&b.adapter)));
    let k = draft.num_servers();
    if k == 0 {
        return;
    }
    let limit = capacity * (1.0 + FIT_SLACK);

    for item in order {
        let after = |s: usize| -> f64 {
            effective(draft.tps[s] + item.tps, draft.max_rank[s].max(item.rank), op_points)
        };
        let occupied = |s: usize| !draft.bundles[s].is_empty();

        let same_or_higher = (0..k)
            .filter(|&s| occupied(s) && draft.max_rank[s] >= item.rank && after(s) <= limit)
            .min_by(|&x, &y| {
                draft.max_rank[y]
                    .cmp(&draft.max_rank[x])
                    .then(draft.load[x].total_cmp(&draft.load[y]))
                    .then(x.cmp(&y))
            });
        let target = same_or_higher
            .or_else(|| (0..k).find(|&s| !occupied(s)))
            .or_else(|| {
                (0..k)
                    .filter(|&s| draft.max_rank[s] < item.rank && after(s) <= limit)
                    .min_by(|&x, &y| after(x).total_cmp(&after(y)).then(x.cmp(&y)))
            })
            .unwrap_or_else(|| {
                (0..k)
                    .min_by(|&x, &y| {
                        after(x)
                            .total_cmp(&after(y))
                            .then(draft.load[x].total_cmp(&draft.load[y]))
                            .then(x.cmp(&y))
                    })
                    .expect("k > 0")
            });
        draft.add(ServerId(target), &item.adapter, item.rank, item.phi, item.util, item.tps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(items: &[(&str, f64)]) -> Vec<(AdapterId, f64)> {
        items.iter().map(|&(a, u)| (AdapterId::from(a), u)).collect()
    }

    fn pieces(out: &PackOutcome, adapter: &str) -> Vec<(usize, f64)> {
        out.placed
            .iter()
            .filter(|(_, a, _)| a.as_str() == adapter)
            .map(|(s, _, phi)| (s.0, *phi))
            .collect()
    }

    #[test]
    fn hand_traced_split() {
        let out = fractional_bin_pack(
            &ids(&[("A1", 0.5), ("A2", 0.4), ("A3", 0.35)]),
            &[ServerId(1), ServerId(2)],
            0.625,
        );
        assert!(out.leftovers.is_empty());
        assert_eq!(pieces(&out, "A1"), vec![(1, 1.0)]);
        let a2 = pieces(&out, "A2");
        assert_eq!(a2.len(), 2);
        assert_eq!(a2[0].0, 1);
        assert!((a2[0].1 - 0.3125).abs() < 1e-9);
        assert_eq!(a2[1].0, 2);
        assert!((a2[1].1 - 0.6875).abs() < 1e-9);
        assert_eq!(pieces(&out, "A3"), vec![(2, 1.0)]);
    }

    #[test]
    fn whole_fit() {
        let out = fractional_bin_pack(&ids(&[("A1", 0.3)]), &[ServerId(0)], 0.625);
        assert_eq!(pieces(&out, "A1"), vec![(0, 1.0)]);
        assert!(out.leftovers.is_empty());
    }

    #[test]
    fn overflow_becomes_leftover() {
        let out = fractional_bin_pack(&ids(&[("A1", 0.7)]), &[ServerId(0)], 0.625);
        let p = pieces(&out, "A1");
        assert!((p[0].1 - 0.625 / 0.7).abs() < 1e-12);
        assert!((p[0].1 - 0.8929).abs() < 1e-4);
        assert_eq!(out.leftovers.len(), 1);
        assert!((out.leftovers[0].phi - 0.1071).abs() < 1e-4);
        assert!((out.leftovers[0].phi + p[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_servers_means_all_leftovers() {
        let out = fractional_bin_pack(&ids(&[("A1", 0.1), ("A2", 0.2)]), &[], 0.5);
        assert!(out.placed.is_empty());
        assert_eq!(out.leftovers.len(), 2);
        assert!(out.leftovers.iter().all(|l| l.phi == 1.0));
    }

    fn flat_ops() -> OperatingPointTable {
        OperatingPointTable::new([(8, 1000.0), (64, 1000.0), (128, 1000.0)].into()).unwrap()
    }

    fn item(adapter: &str, rank: Rank, util: f64) -> LeftoverItem {
        LeftoverItem {
            adapter: adapter.into(),
            rank,
            phi: 1.0,
            util,
            tps: util * 1000.0,
        }
    }

    fn seed(draft: &mut PlacementDraft, server: usize, adapter: &str, rank: Rank, util: f64) {
        draft.add(ServerId(server), &adapter.into(), rank, 1.0, util, util * 1000.0);
    }

    #[test]
    fn leftover_prefers_high_max_rank_then_low_load() {
        let mut draft = PlacementDraft::new(3);
        seed(&mut draft, 0, "x", 128, 0.5);
        seed(&mut draft, 1, "y", 128, 0.3);
        seed(&mut draft, 2, "z", 8, 0.1);
        allocate_leftovers(&[item("L", 64, 0.1)], &mut draft, 1.0, &flat_ops());
        assert_eq!(draft.bundles[1].len(), 2);
        assert_eq!(draft.max_rank(ServerId(1)), 128);
    }

    #[test]
    fn single_server_takes_everything() {
        let mut draft = PlacementDraft::new(1);
        seed(&mut draft, 0, "x", 8, 0.9);
        allocate_leftovers(&[item("L", 128, 0.5)], &mut draft, 0.5, &flat_ops());
        assert_eq!(draft.bundles[0].len(), 2);
    }

    #[test]
    fn leftovers_go_highest_rank_first() {
        let mut draft = PlacementDraft::new(2);
        seed(&mut draft, 0, "x", 8, 0.2);
        seed(&mut draft, 1, "y", 8, 0.2);
        allocate_leftovers(&[item("lo", 8, 0.1), item("hi", 128, 0.1)], &mut draft, 1.0, &flat_ops());
        // hi lands first on s0 and raises its max rank; lo then prefers s0
        assert_eq!(draft.max_rank(ServerId(0)), 128);
        let names: Vec<&str> = draft.bundles[0].iter().map(|(a, _)| a.as_str()).collect();
        assert_eq!(names, vec!["x", "hi", "lo"]);
        assert_eq!(draft.bundles[1].len(), 1);
    }

    #[test]
    fn empty_server_absorbs_before_mixing_ranks() {
        let mut draft = PlacementDraft::new(2);
        seed(&mut draft, 0, "x", 8, 0.2);
        allocate_leftovers(&[item("hi", 128, 0.1)], &mut draft, 1.0, &flat_ops());
        assert_eq!(draft.max_rank(ServerId(0)), 8);
        assert_eq!(draft.max_rank(ServerId(1)), 128);
    }

    #[test]
    fn residual_merges_with_existing_piece() {
        let mut draft = PlacementDraft::new(1);
        draft.add(ServerId(0), &"A".into(), 8, 0.6, 0.6, 600.0);
        allocate_leftovers(
            &[LeftoverItem {
                adapter: "A".into(),
                rank: 8,
                phi: 0.4,
                util: 0.4,
                tps: 400.0,
            }],
            &mut draft,
            0.5,
            &flat_ops(),
        );
        let a = draft.into_assignment(0).unwrap();
        assert_eq!(a.bundle(ServerId(0)), &[("A".into(), 1.0)]);
    }
}
