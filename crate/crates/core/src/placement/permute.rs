use std::collections::BTreeMap;

use crate::demand::DemandEstimate;
use crate::domain::{AdapterId, Assignment, ServerId};

/// `m[i][j]`: traffic (tokens/s) that stays in place if fresh bundle `i` is
/// put on the server that held previous bundle `j`.
pub fn overlap_matrix(fresh: &Assignment, previous: &Assignment, demand: &DemandEstimate) -> Vec<Vec<f64>> {
    let k = fresh.num_servers();
    let prev: Vec<BTreeMap<&AdapterId, f64>> = (0..k)
        .map(|j| {
            if j < previous.num_servers() {
                previous.bundle(ServerId(j)).iter().map(|(a, p)| (a, *p)).collect()
            } else {
                BTreeMap::new()
            }
        })
        .collect();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    fresh
                        .bundle(ServerId(i))
                        .iter()
                        .filter_map(|(a, phi)| {
                            prev[j]
                                .get(a)
                                .map(|q| demand.get(a).unwrap_or(0.0) * phi.min(*q))
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Maximum-weight perfect matching on a square matrix (Hungarian method).
/// Returns `perm` with row `i` matched to column `perm[i]`.
pub fn max_weight_matching(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    if n == 0 {
        return Vec::new();
    }
    let big = w
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, &x| m.max(x));
    // minimize big - w; 1-based potentials as in the classic formulation
    let cost = |i: usize, j: usize| big - w[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

pub fn matching_weight(w: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| w[i][j]).sum()
}

/// Relabels `fresh` so that as much projected traffic as possible stays on
/// the server it was already on. Keeps the identity labelling when nothing
/// beats it, and passes `fresh` through when there is no history.
pub fn permute_assignment(fresh: &Assignment, previous: &Assignment, demand: &DemandEstimate) -> Assignment {
    if previous.is_empty() || previous.num_servers() != fresh.num_servers() {
        return fresh.clone();
    }
    let w = overlap_matrix(fresh, previous, demand);
    let perm = max_weight_matching(&w);
    let identity: Vec<usize> = (0..w.len()).collect();
    let best = matching_weight(&w, &perm);
    let base = matching_weight(&w, &identity);
    if best <= base + 1e-9 * base.abs().max(1.0) {
        return fresh.clone();
    }
    fresh.relabel(&perm)
}
