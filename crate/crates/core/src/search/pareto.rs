//! Non-dominated sorting, crowding distance and tournament selection.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng;

use crate::fitness::FitnessVector;

/// Splits indices into successive non-dominated fronts (rank 1 first).
pub fn non_dominated_sort(fitness: &[FitnessVector]) -> Vec<Vec<usize>> {
    let n = fitness.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut domination_count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if fitness[i].dominates(&fitness[j]) {
                dominated_by[i].push(j);
                domination_count[j] += 1;
            } else if fitness[j].dominates(&fitness[i]) {
                dominated_by[j].push(i);
                domination_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| domination_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                domination_count[j] -= 1;
                if domination_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of `front`, in the same order.
/// Boundary members get infinity.
pub fn crowding_distance(fitness: &[FitnessVector], front: &[usize]) -> Vec<f64> {
    let m = front.len();
    let mut distance = vec![0.0; m];
    if m <= 2 {
        return vec![f64::INFINITY; m];
    }
    for obj in 0..3 {
        let value = |pos: usize| fitness[front[pos]].objectives()[obj];
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| value(a).total_cmp(&value(b)).then(a.cmp(&b)));
        let lo = value(order[0]);
        let hi = value(order[m - 1]);
        distance[order[0]] = f64::INFINITY;
        distance[order[m - 1]] = f64::INFINITY;
        if hi > lo {
            for w in 1..m - 1 {
                distance[order[w]] += (value(order[w + 1]) - value(order[w - 1])) / (hi - lo);
            }
        }
    }
    distance
}

/// Rank (1 = non-dominated) and crowding distance of a selected member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standing {
    pub rank: usize,
    pub crowding: f64,
}

impl Standing {
    /// Crowded-comparison order: lower rank first, then larger crowding.
    pub fn compare(&self, other: &Standing) -> Ordering {
        self.rank.cmp(&other.rank).then(other.crowding.total_cmp(&self.crowding))
    }
}

/// Picks `min(keep, n)` indices: whole fronts by rank, the last front
/// truncated by descending crowding distance. Returned in selection order
/// with each member's standing.
pub fn select_indices(fitness: &[FitnessVector], keep: usize) -> Vec<(usize, Standing)> {
    let mut chosen = Vec::with_capacity(keep.min(fitness.len()));
    for (r, front) in non_dominated_sort(fitness).into_iter().enumerate() {
        if chosen.len() >= keep {
            break;
        }
        let crowd = crowding_distance(fitness, &front);
        let mut members: Vec<(usize, Standing)> =
            front.iter().zip(crowd).map(|(&i, crowding)| (i, Standing { rank: r + 1, crowding })).collect();
        let room = keep - chosen.len();
        if members.len() > room {
            members.sort_by(|a, b| b.1.crowding.total_cmp(&a.1.crowding).then(a.0.cmp(&b.0)));
            members.truncate(room);
        }
        chosen.extend(members);
    }
    chosen
}

/// Best of `k` distinct uniformly drawn members under the crowded
/// comparison. `k` is capped at the population size.
pub fn tournament<R: Rng + ?Sized>(standings: &[Standing], k: usize, rng: &mut R) -> usize {
    assert!(!standings.is_empty(), "tournament on an empty population");
    let k = k.clamp(1, standings.len());
    sample(rng, standings.len(), k)
        .into_iter()
        .min_by(|&a, &b| standings[a].compare(&standings[b]).then(a.cmp(&b)))
        .expect("k >= 1")
}
