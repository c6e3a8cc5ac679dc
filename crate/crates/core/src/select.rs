//! Importance-plus-diversity selection over scored candidates.
//!
//! `F(S) = Σ_{g∈S} R(g) + γ·|∪_{g∈S} C(g)| / n`, where `C(g)` holds the
//! candidates whose mean embedding lies within `δ` of `g`'s.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

/// Radius used to build coverage sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Median pairwise distance among the candidates.
    Median,
    Fixed(f64),
}

impl Default for DeltaMode {
    fn default() -> Self {
        DeltaMode::Median
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Median over all unordered pairs; zero with fewer than two points.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(euclidean(&points[i], &points[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}

/// `C(g_i)` for every candidate.
#[derive(Clone, Debug)]
pub struct Coverage {
    sets: Vec<FixedBitSet>,
}

impl Coverage {
    pub fn build(points: &[Vec<f64>], delta: f64) -> Self {
        let n = points.len();
        let mut sets = vec![FixedBitSet::with_capacity(n); n];
        for i in 0..n {
            sets[i].insert(i);
            for j in i + 1..n {
                if euclidean(&points[i], &points[j]) <= delta {
                    sets[i].insert(j);
                    sets[j].insert(i);
                }
            }
        }
        Self { sets }
    }

    pub fn from_sets(n: usize, sets: &[Vec<usize>]) -> Self {
        let sets = sets
            .iter()
            .map(|s| {
                let mut b = FixedBitSet::with_capacity(n);
                for &j in s {
                    b.insert(j);
                }
                b
            })
            .collect();
        Self { sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn set(&self, i: usize) -> Vec<usize> {
        self.sets[i].ones().collect()
    }

    fn union_len(&self, s: &[usize]) -> usize {
        let mut u = FixedBitSet::with_capacity(self.len());
        for &i in s {
            u.union_with(&self.sets[i]);
        }
        u.count_ones(..)
    }
}

/// `F(S)`.
pub fn value(s: &[usize], r: &[f64], cov: &Coverage, gamma: f64) -> f64 {
    if s.is_empty() || cov.is_empty() {
        return 0.0;
    }
    let sum: f64 = s.iter().map(|&i| r[i]).sum();
    sum + gamma * cov.union_len(s) as f64 / cov.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Candidate indices in pick order.
    pub chosen: Vec<usize>,
    /// Marginal gain of each pick.
    pub gains: Vec<f64>,
    pub value: f64,
}

fn gain(i: usize, r: &[f64], cov: &Coverage, covered: &FixedBitSet, gamma: f64) -> f64 {
    let fresh = cov.sets[i].difference(covered).count();
    r[i] + gamma * fresh as f64 / cov.len() as f64
}

/// Picks `min(m, n)` candidates by repeated argmax of marginal gain, ties
/// to the lowest index.
pub fn greedy(r: &[f64], cov: &Coverage, gamma: f64, m: usize) -> Selection {
    let n = cov.len();
    let mut covered = FixedBitSet::with_capacity(n);
    let mut taken = vec![false; n];
    let mut chosen = Vec::new();
    let mut gains = Vec::new();
    for _ in 0..m.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            let g = gain(i, r, cov, &covered, gamma);
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((i, g));
            }
        }
        let (i, g) = best.expect("candidate left");
        taken[i] = true;
        covered.union_with(&cov.sets[i]);
        chosen.push(i);
        gains.push(g);
    }
    let v = value(&chosen, r, cov, gamma);
    Selection {
        chosen,
        gains,
        value: v,
    }
}

#[derive(PartialEq)]
struct Entry {
    gain: f64,
    idx: usize,
    round: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.total_cmp(&other.gain).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Same result as [`greedy`], re-evaluating only candidates whose stale
/// gain still tops the queue.
pub fn lazy_greedy(r: &[f64], cov: &Coverage, gamma: f64, m: usize) -> Selection {
    let n = cov.len();
    let mut covered = FixedBitSet::with_capacity(n);
    let mut heap: BinaryHeap<Entry> = (0..n)
        .map(|i| Entry {
            gain: gain(i, r, cov, &covered, gamma),
            idx: i,
            round: 0,
        })
        .collect();
    let mut chosen = Vec::new();
    let mut gains = Vec::new();
    while chosen.len() < m.min(n) {
        let top = heap.pop().expect("candidate left");
        if top.round == chosen.len() {
            covered.union_with(&cov.sets[top.idx]);
            chosen.push(top.idx);
            gains.push(top.gain);
        } else {
            heap.push(Entry {
                gain: gain(top.idx, r, cov, &covered, gamma),
                idx: top.idx,
                round: chosen.len(),
            });
        }
    }
    let v = value(&chosen, r, cov, gamma);
    Selection {
        chosen,
        gains,
        value: v,
    }
}

/// Indices of the `k` largest strictly positive scores, by descending
/// score then ascending index.
pub fn top_k_positive(r: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..r.len()).filter(|&i| r[i] > 0.0).collect();
    idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Exhaustive maximum of `F` over subsets of size at most `m`.
pub fn exhaustive_opt(r: &[f64], cov: &Coverage, gamma: f64, m: usize) -> f64 {
    let n = cov.len();
    assert!(n <= 20, "exhaustive search is for small instances");
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > m {
            continue;
        }
        let s: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
        best = best.max(value(&s, r, cov, gamma));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abc() -> Coverage {
        Coverage::from_sets(3, &[vec![0, 1], vec![0, 1], vec![2]])
    }

    #[test]
    fn worked_value_example() {
        let r = [1.0, 1.0, 1.0];
        let c = abc();
        assert_eq!(value(&[], &r, &c, 3.0), 0.0);
        assert_eq!(value(&[0], &r, &c, 3.0), 3.0);
        assert_eq!(value(&[2], &r, &c, 3.0), 2.0);
        let s = greedy(&r, &c, 3.0, 1);
        assert_eq!(s.chosen, vec![0]);
        assert_eq!(lazy_greedy(&r, &c, 3.0, 1), s);
    }

    #[test]
    fn coverage_radius() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        let c = Coverage::build(&pts, 1.5);
        assert_eq!(c.set(1), vec![0, 1]);
        let pts = vec![vec![0.0], vec![1.5], vec![3.0]];
        assert_eq!(Coverage::build(&pts, 1.5).set(1), vec![0, 1, 2]);
        assert_eq!(Coverage::build(&pts, 0.0).set(1), vec![1]);
        assert_eq!(Coverage::build(&pts, f64::INFINITY).set(0), vec![0, 1, 2]);
    }

    #[test]
    fn median_distance() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(median_pairwise_distance(&pts), 2.0);
        assert_eq!(median_pairwise_distance(&pts[..1]), 0.0);
    }

    #[test]
    fn top_k_filters_and_orders() {
        assert_eq!(top_k_positive(&[0.5, -1.0, 2.0, 0.5, 0.0], 3), vec![2, 0, 3]);
        assert_eq!(top_k_positive(&[0.5, 2.0], 1), vec![1]);
    }

    #[test]
    fn asks_for_more_than_available() {
        let s = greedy(&[1.0, 2.0, 3.0], &abc(), 1.0, 10);
        assert_eq!(s.chosen.len(), 3);
    }
}
