//! Closed and open triads among same-class nodes.
//!
//! Each linked pair is dated by its first interaction. A closed triad is a
//! triangle whose closing pair `(p, q)` formed strictly after the other two;
//! triangles whose latest formation time is shared by two pairs have no
//! well-defined closing edge and are skipped. An open triad is a wedge
//! `p - s - q` with `p` and `q` never linked.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::graph::{ClassId, NodeId, TemporalGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriadKind {
    Closed,
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triad {
    pub class: ClassId,
    pub kind: TriadKind,
    pub s: NodeId,
    pub p: NodeId,
    pub q: NodeId,
    /// `[t_sp, t_sq, t_pq]` for closed triads, `[t_sp, t_sq]` for open ones.
    pub times: Vec<f64>,
    #[serde(rename = "R", default)]
    pub r: f64,
}

impl Triad {
    pub fn nodes(&self) -> [NodeId; 3] {
        [self.s, self.p, self.q]
    }

    /// Identity ignoring the score.
    pub fn key(&self) -> (TriadKind, NodeId, NodeId, NodeId) {
        (self.kind, self.s, self.p, self.q)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriadSet {
    pub closed: Vec<Triad>,
    pub open: Vec<Triad>,
}

/// Formation time of each linked pair among the admitted nodes, keyed by
/// `(min, max)`, with per-node sorted neighbor maps.
pub struct PairIndex {
    pub first: HashMap<(NodeId, NodeId), f64>,
    pub adj: BTreeMap<NodeId, BTreeMap<NodeId, f64>>,
}

impl PairIndex {
    pub fn build(graph: &TemporalGraph, admit: impl Fn(NodeId) -> bool, cutoff: f64) -> Self {
        let mut first: HashMap<(NodeId, NodeId), f64> = HashMap::new();
        let mut adj: BTreeMap<NodeId, BTreeMap<NodeId, f64>> = BTreeMap::new();
        for e in graph.events() {
            if e.t >= cutoff {
                break;
            }
            if !admit(e.src) || !admit(e.dst) {
                continue;
            }
            let key = (e.src.min(e.dst), e.src.max(e.dst));
            first.entry(key).or_insert(e.t);
            adj.entry(e.src).or_default().entry(e.dst).or_insert(e.t);
            adj.entry(e.dst).or_default().entry(e.src).or_insert(e.t);
        }
        Self { first, adj }
    }

    pub fn time(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.first.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn edge_count(&self) -> usize {
        self.first.len()
    }

    pub fn max_degree(&self) -> usize {
        self.adj.values().map(|m| m.len()).max().unwrap_or(0)
    }
}

/// Classifies the triangle `{a, b, c}` given its three formation times.
/// Returns `(s, p, q, [t_sp, t_sq, t_pq])` when the latest pair is unique.
pub fn closed_from_triangle(
    a: NodeId,
    b: NodeId,
    c: NodeId,
    t_ab: f64,
    t_ac: f64,
    t_bc: f64,
) -> Option<(NodeId, NodeId, NodeId, [f64; 3])> {
    let cands = [
        (t_ab, c, a, b, t_ac, t_bc),
        (t_ac, b, a, c, t_ab, t_bc),
        (t_bc, a, b, c, t_ab, t_ac),
    ];
    let top = cands.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let mut it = cands.iter().filter(|c| c.0 == top);
    let &(t_pq, s, p0, q0, t_s_p0, t_s_q0) = it.next()?;
    if it.next().is_some() {
        return None;
    }
    let (p, q, t_sp, t_sq) = if p0 < q0 {
        (p0, q0, t_s_p0, t_s_q0)
    } else {
        (q0, p0, t_s_q0, t_s_p0)
    };
    Some((s, p, q, [t_sp, t_sq, t_pq]))
}

/// Enumerates the triads of `class` among nodes accepted by `admit`,
/// using only events strictly before `cutoff`. Both lists are sorted by
/// `(s, p, q)`.
pub fn enumerate_triads(
    graph: &TemporalGraph,
    class: ClassId,
    admit: impl Fn(NodeId) -> bool,
    cutoff: f64,
) -> TriadSet {
    let idx = PairIndex::build(graph, |i| graph.label(i) == class && admit(i), cutoff);
    let mut closed = Vec::new();
    let mut open = Vec::new();
    for (&u, nu) in &idx.adj {
        for (&v, &t_uv) in nu.range(u + 1..) {
            let nv = &idx.adj[&v];
            for (&w, &t_uw) in nu.range(v + 1..) {
                if let Some(&t_vw) = nv.get(&w) {
                    if let Some((s, p, q, times)) = closed_from_triangle(u, v, w, t_uv, t_uw, t_vw) {
                        closed.push(Triad {
                            class,
                            kind: TriadKind::Closed,
                            s,
                            p,
                            q,
                            times: times.to_vec(),
                            r: 0.0,
                        });
                    }
                }
            }
        }
    }
    for (&s, ns) in &idx.adj {
        let nbrs: Vec<(NodeId, f64)> = ns.iter().map(|(&k, &t)| (k, t)).collect();
        for (a, &(p, t_sp)) in nbrs.iter().enumerate() {
            let np = &idx.adj[&p];
            for &(q, t_sq) in &nbrs[a + 1..] {
                if !np.contains_key(&q) {
                    open.push(Triad {
                        class,
                        kind: TriadKind::Open,
                        s,
                        p,
                        q,
                        times: vec![t_sp, t_sq],
                        r: 0.0,
                    });
                }
            }
        }
    }
    closed.sort_by_key(|t| (t.s, t.p, t.q));
    TriadSet { closed, open }
}

/// `d_k · |E_k|` for the admitted subgraph.
pub fn closed_count_bound(graph: &TemporalGraph, class: ClassId, admit: impl Fn(NodeId) -> bool, cutoff: f64) -> usize {
    let idx = PairIndex::build(graph, |i| graph.label(i) == class && admit(i), cutoff);
    idx.max_degree() * idx.edge_count()
}
