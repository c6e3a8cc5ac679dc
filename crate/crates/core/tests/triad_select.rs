mod common;

use common::triads::{brute_force, keys};
use common::{edge, random_graph, rng};
use otgnet::diff::Tensor;
use otgnet::graph::TemporalGraph;
use otgnet::select::{exhaustive_opt, greedy, lazy_greedy, top_k_positive, value, Coverage};
use otgnet::triad::{closed_count_bound, enumerate_triads};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn triads_match_brute_force_on_random_graphs() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let n = r.random_range(6..14);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let m = r.random_range(10..=200);
        let g = random_graph(seed, labels, m, 12, 1);
        for class in 0..2 {
            for cutoff in [f64::INFINITY, 6.0] {
                assert_eq!(keys(&g, class, cutoff), brute_force(&g, class, cutoff), "seed {seed}");
            }
            let found = enumerate_triads(&g, class, |_| true, f64::INFINITY);
            assert!(found.closed.len() <= closed_count_bound(&g, class, |_| true, f64::INFINITY));
        }
    }
}

#[test]
fn documented_triad_examples() {
    let g = |edges: Vec<(usize, usize, f64)>| {
        let ev = edges.into_iter().map(|(a, b, t)| edge(a, b, t)).collect();
        TemporalGraph::new(Tensor::zeros(4, 1), vec![0; 4], ev).unwrap()
    };
    let closed = enumerate_triads(
        &g(vec![(1, 2, 1.0), (1, 3, 2.0), (2, 3, 3.0)]),
        0,
        |_| true,
        f64::INFINITY,
    );
    assert_eq!(closed.closed.len(), 1);
    assert_eq!((closed.closed[0].s, closed.closed[0].p, closed.closed[0].q), (1, 2, 3));
    assert!(closed.open.is_empty());

    let open = enumerate_triads(&g(vec![(1, 2, 1.0), (1, 3, 2.0)]), 0, |_| true, f64::INFINITY);
    assert!(open.closed.is_empty());
    assert_eq!(open.open.len(), 1);
    assert_eq!(open.open[0].s, 1);

    // two pairs share the latest time: no single closing edge
    let tied = enumerate_triads(
        &g(vec![(1, 2, 1.0), (1, 3, 3.0), (2, 3, 3.0)]),
        0,
        |_| true,
        f64::INFINITY,
    );
    assert!(tied.closed.is_empty() && tied.open.is_empty());
}

fn random_instance(r: &mut impl Rng, n: usize) -> (Vec<f64>, Coverage) {
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let sets: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut s: Vec<usize> = (0..n).filter(|_| r.random::<f64>() < 0.3).collect();
            s.push(i);
            s
        })
        .collect();
    (scores, Coverage::from_sets(n, &sets))
}

#[test]
fn value_is_monotone_and_submodular() {
    let mut r = rng(11);
    for _ in 0..200 {
        let n = r.random_range(2..=12);
        let (scores, cov) = random_instance(&mut r, n);
        let gamma = r.random_range(0.0..5.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let x = perm[n - 1];
        let b_len = r.random_range(0..n);
        let a_len = r.random_range(0..=b_len);
        let b = &perm[..b_len];
        let a = &perm[..a_len];
        let f = |s: &[usize]| value(s, &scores, &cov, gamma);
        let with = |s: &[usize]| {
            let mut v = s.to_vec();
            v.push(x);
            f(&v)
        };
        assert!(f(a) <= f(b) + 1e-12);
        assert!(with(a) - f(a) >= with(b) - f(b) - 1e-9);
    }
}

#[test]
fn greedy_reaches_the_approximation_bound() {
    let mut r = rng(12);
    let bound = 1.0 - (-1.0f64).exp();
    for _ in 0..100 {
        let n = r.random_range(1..=12);
        let m = r.random_range(1..=4);
        let (scores, cov) = random_instance(&mut r, n);
        let gamma = r.random_range(0.0..5.0);
        let g = greedy(&scores, &cov, gamma, m);
        let opt = exhaustive_opt(&scores, &cov, gamma, m);
        assert!(g.value >= bound * opt - 1e-12, "greedy {} opt {opt}", g.value);
        assert!(g.gains.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        let lazy = lazy_greedy(&scores, &cov, gamma, m);
        assert_eq!(g.chosen, lazy.chosen);
    }
}

#[test]
fn greedy_breaks_ties_by_index() {
    let cov = Coverage::from_sets(3, &[vec![0, 1], vec![0, 1], vec![2]]);
    for sel in [greedy(&[1.0; 3], &cov, 3.0, 1), lazy_greedy(&[1.0; 3], &cov, 3.0, 1)] {
        assert_eq!(sel.chosen, vec![0]);
        assert!((sel.value - 3.0).abs() < 1e-12);
    }
    assert_eq!(greedy(&[1.0; 3], &cov, 3.0, 10).chosen.len(), 3);
}

#[test]
fn coverage_on_a_line() {
    let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
    let cov = Coverage::build(&pts, 1.5);
    // |1 - 3| = 2 exceeds the radius
    assert_eq!(cov.set(1), vec![0, 1]);
    assert_eq!(cov.set(0), vec![0, 1]);
    assert_eq!(Coverage::build(&pts, 2.0).set(1), vec![0, 1, 2]);
    assert_eq!(Coverage::build(&pts, 0.0).set(2), vec![2]);
    assert_eq!(Coverage::build(&pts, f64::INFINITY).set(0), vec![0, 1, 2]);
}

proptest! {
    #[test]
    fn top_k_keeps_only_positive_scores(v in proptest::collection::vec(-5.0f64..5.0, 0..40), k in 0usize..50) {
        let top = top_k_positive(&v, k);
        prop_assert!(top.len() <= k);
        prop_assert!(top.iter().all(|&i| v[i] > 0.0));
        prop_assert!(top.windows(2).all(|w| v[w[0]] >= v[w[1]]));
        let positive = v.iter().filter(|&&x| x > 0.0).count();
        prop_assert_eq!(top.len(), positive.min(k));
    }
}
