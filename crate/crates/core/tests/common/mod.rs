#![allow(dead_code)]

use otgnet::diff::Tensor;
use otgnet::graph::{ClassId, Dataset, NodeId, TaskSpec, TemporalEdge, TemporalGraph};
use otgnet::model::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

pub fn edge(src: NodeId, dst: NodeId, t: f64) -> TemporalEdge {
    TemporalEdge { src, dst, t }
}

/// Random graph on `n` nodes with `labels`, `m` events at integer times
/// drawn from `0..t_max`.
pub fn random_graph(seed: u64, labels: Vec<ClassId>, m: usize, t_max: u32, d: usize) -> TemporalGraph {
    let mut r = rng(seed);
    let n = labels.len();
    let feats = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let events = (0..m)
        .map(|_| {
            let a = r.random_range(0..n);
            let mut b = r.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            edge(a, b, r.random_range(0..t_max) as f64)
        })
        .collect();
    TemporalGraph::new(Tensor::from_vec(n, d, feats), labels, events).unwrap()
}

/// Two tasks of two classes each over 16 nodes, with same- and
/// cross-class events in both windows.
pub fn fixture(seed: u64) -> Dataset {
    let mut r = rng(seed);
    let n = 16;
    let d = 3;
    let labels: Vec<ClassId> = (0..n).map(|i| i / 4).collect();
    let feats = (0..n * d)
        .map(|k| labels[k / d] as f64 * 0.5 + r.random_range(-1.0..1.0))
        .collect();
    let mut events = Vec::new();
    for task in 0..2 {
        let lo = task * 8;
        let t0 = task as f64 * 10.0;
        for _ in 0..24 {
            let a = lo + r.random_range(0..8);
            let b = if r.random::<f64>() < 0.3 && task == 1 {
                r.random_range(0..8)
            } else {
                lo + r.random_range(0..8)
            };
            if a != b {
                events.push(edge(a, b, t0 + r.random_range(0.0..10.0)));
            }
        }
    }
    let graph = TemporalGraph::new(Tensor::from_vec(n, d, feats), labels, events).unwrap();
    let tasks = vec![
        TaskSpec {
            task_id: 0,
            classes: vec![0, 1],
            t_start: 0.0,
            t_end: 10.0,
        },
        TaskSpec {
            task_id: 1,
            classes: vec![2, 3],
            t_start: 10.0,
            t_end: 20.0,
        },
    ];
    Dataset::new(graph, tasks).unwrap()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        time_dim: 3,
        attn_dim: 4,
        layers: 2,
        neighbors: 3,
        head_hidden: 5,
        ib_hidden: 4,
        critic_hidden: 4,
        ..Default::default()
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub mod logistic {
    use nalgebra::{DMatrix, DVector};
    use otgnet::diff::{Bound, ParamStore, Scalar, Tape, Tensor, Var};
    use otgnet::influence::{per_row_ce, PerItemLoss};
    use rand::Rng;

    /// Softmax regression on fixed rows `[x, 1]`; one `(d+1) × C` weight.
    pub struct Logistic {
        pub phi: Vec<Vec<f64>>,
        pub y: Vec<usize>,
        pub classes: usize,
    }

    impl Logistic {
        pub fn random(seed: u64, n: usize, d: usize, classes: usize, spread: f64) -> Self {
            let mut r = super::rng(seed);
            let centers: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..d).map(|_| r.random_range(-spread..spread)).collect())
                .collect();
            let mut phi = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % classes;
                let mut row: Vec<f64> = centers[c].iter().map(|m| m + r.random_range(-1.0..1.0)).collect();
                row.push(1.0);
                phi.push(row);
                y.push(c);
            }
            Self { phi, y, classes }
        }

        pub fn dim(&self) -> usize {
            self.phi[0].len() * self.classes
        }

        pub fn store(&self, theta: &[f64]) -> ParamStore {
            let mut s = ParamStore::new();
            s.add(
                "theta",
                Tensor::from_vec(self.phi[0].len(), self.classes, theta.to_vec()),
            );
            s
        }

        fn probs(&self, theta: &[f64], i: usize) -> Vec<f64> {
            let c = self.classes;
            let z: Vec<f64> = (0..c)
                .map(|k| self.phi[i].iter().enumerate().map(|(f, x)| x * theta[f * c + k]).sum())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }

        pub fn item_loss(&self, theta: &[f64], i: usize) -> f64 {
            -self.probs(theta, i)[self.y[i]].ln()
        }

        /// Value, gradient and Hessian of `Σ_i w_i l_i + (l2/2)|θ|²`.
        pub fn objective(&self, theta: &[f64], w: &[f64], l2: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
            let c = self.classes;
            let p_dim = self.dim();
            let mut v = 0.5 * l2 * theta.iter().map(|t| t * t).sum::<f64>();
            let mut g = DVector::from_iterator(p_dim, theta.iter().map(|t| l2 * t));
            let mut h = DMatrix::identity(p_dim, p_dim) * l2;
            for (i, &wi) in w.iter().enumerate() {
                if wi == 0.0 {
                    continue;
                }
                let p = self.probs(theta, i);
                v += wi * -p[self.y[i]].ln();
                let phi = &self.phi[i];
                for (f, &xf) in phi.iter().enumerate() {
                    for k in 0..c {
                        let yk = if k == self.y[i] { 1.0 } else { 0.0 };
                        g[f * c + k] += wi * xf * (p[k] - yk);
                        for (f2, &xf2) in phi.iter().enumerate() {
                            for k2 in 0..c {
                                let dk = if k == k2 { p[k] } else { 0.0 };
                                h[(f * c + k, f2 * c + k2)] += wi * xf * xf2 * (dk - p[k] * p[k2]);
                            }
                        }
                    }
                }
            }
            (v, g, h)
        }

        /// Newton iterations to a gradient norm below `1e-12`.
        pub fn fit(&self, w: &[f64], l2: f64, start: &[f64]) -> Vec<f64> {
            let mut theta = DVector::from_column_slice(start);
            for _ in 0..100 {
                let (_, g, h) = self.objective(theta.as_slice(), w, l2);
                if g.norm() < 1e-12 {
                    break;
                }
                let step = h.cholesky().expect("positive definite").solve(&g);
                theta -= step;
            }
            theta.as_slice().to_vec()
        }

        pub fn mean_loss(&self, theta: &[f64], items: &[usize]) -> f64 {
            items.iter().map(|&i| self.item_loss(theta, i)).sum::<f64>() / items.len() as f64
        }
    }

    impl PerItemLoss for Logistic {
        fn len(&self) -> usize {
            self.y.len()
        }

        fn item_losses<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, items: &[usize]) -> otgnet::Result<Var> {
            let d = self.phi[0].len();
            let rows: Vec<f64> = items.iter().flat_map(|&i| self.phi[i].clone()).collect();
            let x = tape.constant_f64(&Tensor::from_vec(items.len(), d, rows))?;
            let logits = tape.matmul(x, p.vars()[0])?;
            per_row_ce(tape, logits, &items.iter().map(|&i| self.y[i]).collect::<Vec<_>>())
        }
    }
}

pub mod triads {
    use std::collections::HashMap;

    use otgnet::graph::{NodeId, TemporalGraph};
    use otgnet::triad::{enumerate_triads, TriadKind};

    pub type Key = (u8, NodeId, NodeId, NodeId, Vec<u64>);

    /// Triple-loop reference over every node triple of `class`.
    pub fn brute_force(g: &TemporalGraph, class: usize, cutoff: f64) -> Vec<Key> {
        let mut first: HashMap<(NodeId, NodeId), f64> = HashMap::new();
        for e in g.events() {
            if e.t >= cutoff || g.label(e.src) != class || g.label(e.dst) != class {
                continue;
            }
            let k = (e.src.min(e.dst), e.src.max(e.dst));
            let t = first.entry(k).or_insert(e.t);
            *t = t.min(e.t);
        }
        let pair = |a: NodeId, b: NodeId| first.get(&(a.min(b), a.max(b))).copied();
        let nodes: Vec<NodeId> = (0..g.node_count()).filter(|&i| g.label(i) == class).collect();
        let mut out = Vec::new();
        for (x, &a) in nodes.iter().enumerate() {
            for (y, &b) in nodes.iter().enumerate().skip(x + 1) {
                for &c in &nodes[y + 1..] {
                    let sides = [(a, b, c), (a, c, b), (b, c, a)];
                    let times: Vec<Option<f64>> = sides.iter().map(|&(u, v, _)| pair(u, v)).collect();
                    if times.iter().all(Option::is_some) {
                        let t: Vec<f64> = times.iter().map(|t| t.unwrap()).collect();
                        let top = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let at_top: Vec<usize> = (0..3).filter(|&k| t[k] == top).collect();
                        if at_top.len() == 1 {
                            let (p, q, s) = sides[at_top[0]];
                            let (p, q) = (p.min(q), p.max(q));
                            let ts = [pair(s, p).unwrap(), pair(s, q).unwrap(), top];
                            out.push((0, s, p, q, ts.iter().map(|v| v.to_bits()).collect()));
                        }
                    }
                    // each node of the triple as the wedge center
                    for &(p, q, s) in &sides {
                        if let (Some(tp), Some(tq), None) = (pair(s, p), pair(s, q), pair(p, q)) {
                            let (p, q, tp, tq) = if p < q { (p, q, tp, tq) } else { (q, p, tq, tp) };
                            out.push((1, s, p, q, vec![tp.to_bits(), tq.to_bits()]));
                        }
                    }
                }
            }
        }
        out.sort();
        out
    }

    pub fn keys(g: &TemporalGraph, class: usize, cutoff: f64) -> Vec<Key> {
        let set = enumerate_triads(g, class, |_| true, cutoff);
        let mut out: Vec<Key> = set
            .closed
            .iter()
            .chain(&set.open)
            .map(|t| {
                let k = if t.kind == TriadKind::Closed { 0 } else { 1 };
                (k, t.s, t.p, t.q, t.times.iter().map(|v| v.to_bits()).collect())
            })
            .collect();
        out.sort();
        out
    }
}
