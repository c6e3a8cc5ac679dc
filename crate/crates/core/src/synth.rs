//! Seeded open temporal graphs with class arrivals, cross-class edges and
//! wedge closure.
//!
//! Task `j` owns the window `[j·W, (j+1)·W)`. Same-class pairs of its
//! classes link in the first `0.7·W`, cross-class pairs (to earlier
//! classes, or to another class of the same task at half the rate) anywhere
//! in the window. A node without same-class links is first seen through a
//! cross-class edge, possibly in a later window. Afterwards each open same-class wedge
//! `p - s - q` closes with probability `p_tri` at a time after both of its
//! edges.

use std::collections::{BTreeMap, BTreeSet};

use otg_diff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ClassId, Dataset, NodeId, TaskSpec, TemporalEdge, TemporalGraph};
use crate::triad::enumerate_triads;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinMode {
    /// Independent same-class pairs.
    #[default]
    Sbm,
    /// Each node links to one earlier node of its class, so rate edges
    /// alone never form a triangle.
    Tree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub nodes_per_class: usize,
    pub feature_dim: usize,
    /// Norm of each class center.
    pub center_norm: f64,
    /// Per-coordinate feature noise.
    pub noise: f64,
    /// Probability that a same-class pair links (`Sbm` mode).
    pub within_rate: f64,
    /// Probability that a new-class node links to an earlier-class node.
    pub cross_rate: f64,
    pub p_tri: f64,
    pub mode: WithinMode,
    /// Width of each task window.
    pub window: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            classes_per_task: 2,
            nodes_per_class: 100,
            feature_dim: 16,
            center_norm: 1.5,
            noise: 1.0,
            within_rate: 0.06,
            cross_rate: 0.01,
            p_tri: 0.1,
            mode: WithinMode::Sbm,
            window: 100.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "tasks, classes_per_task and feature_dim must be positive".into(),
            ));
        }
        if self.nodes_per_class < 3 {
            return Err(Error::Config("nodes_per_class must be at least 3".into()));
        }
        for (name, v) in [
            ("within_rate", self.within_rate),
            ("cross_rate", self.cross_rate),
            ("p_tri", self.p_tri),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.window > 0.0) || !self.window.is_finite() {
            return Err(Error::Config("window must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.center_norm >= 0.0) {
            return Err(Error::Config("noise and center_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Builds the dataset described by `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_classes = cfg.tasks * cfg.classes_per_task;
    let n = n_classes * cfg.nodes_per_class;
    let d = cfg.feature_dim;
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| std.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * cfg.center_norm / norm).collect()
        })
        .collect();
    let labels: Vec<ClassId> = (0..n).map(|i| i / cfg.nodes_per_class).collect();
    let mut feats = Vec::with_capacity(n * d);
    for &c in &labels {
        for k in 0..d {
            feats.push(centers[c][k] + cfg.noise * std.sample(&mut rng));
        }
    }

    let members = |c: ClassId| c * cfg.nodes_per_class..(c + 1) * cfg.nodes_per_class;
    let mut events = Vec::new();
    // first-link time per same-class pair
    let mut within: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
    for task in 0..cfg.tasks {
        let t0 = task as f64 * cfg.window;
        let rate_end = t0 + 0.7 * cfg.window;
        let classes: Vec<ClassId> = (task * cfg.classes_per_task..(task + 1) * cfg.classes_per_task).collect();
        for &c in &classes {
            let nodes: Vec<NodeId> = members(c).collect();
            match cfg.mode {
                WithinMode::Sbm => {
                    for a in 0..nodes.len() {
                        for b in a + 1..nodes.len() {
                            if rng.random::<f64>() < cfg.within_rate {
                                let t = rng.random_range(t0..rate_end);
                                within.insert((nodes[a], nodes[b]), t);
                                events.push(TemporalEdge {
                                    src: nodes[a],
                                    dst: nodes[b],
                                    t,
                                });
                            }
                        }
                    }
                }
                WithinMode::Tree => {
                    for a in 1..nodes.len() {
                        let b = rng.random_range(0..a);
                        let t = rng.random_range(t0..rate_end);
                        within.insert((nodes[b], nodes[a]), t);
                        events.push(TemporalEdge {
                            src: nodes[a],
                            dst: nodes[b],
                            t,
                        });
                    }
                }
            }
        }
        for &c in &classes {
            for i in members(c) {
                for other in 0..(task + 1) * cfg.classes_per_task {
                    if other == c || (other > c && other / cfg.classes_per_task == task) {
                        continue;
                    }
                    let rate = if other / cfg.classes_per_task == task {
                        cfg.cross_rate / 2.0
                    } else {
                        cfg.cross_rate
                    };
                    for j in members(other) {
                        if rng.random::<f64>() < rate {
                            let t = rng.random_range(t0..t0 + cfg.window);
                            events.push(TemporalEdge { src: i, dst: j, t });
                        }
                    }
                }
            }
        }
    }

    if cfg.p_tri > 0.0 {
        let mut adj: BTreeMap<NodeId, BTreeMap<NodeId, f64>> = BTreeMap::new();
        for (&(a, b), &t) in &within {
            adj.entry(a).or_default().insert(b, t);
            adj.entry(b).or_default().insert(a, t);
        }
        let mut linked: BTreeSet<(NodeId, NodeId)> = within.keys().copied().collect();
        for (&s, nbrs) in &adj {
            let list: Vec<(NodeId, f64)> = nbrs.iter().map(|(&k, &t)| (k, t)).collect();
            for a in 0..list.len() {
                for b in a + 1..list.len() {
                    let (p, tp) = list[a];
                    let (q, tq) = list[b];
                    if linked.contains(&(p, q)) {
                        continue;
                    }
                    if rng.random::<f64>() < cfg.p_tri {
                        let task_end = (labels[s] / cfg.classes_per_task + 1) as f64 * cfg.window;
                        let lo = tp.max(tq);
                        let t = lo + (task_end - lo) * rng.random_range(0.05..1.0);
                        linked.insert((p, q));
                        events.push(TemporalEdge { src: p, dst: q, t });
                    }
                }
            }
        }
    }

    let graph = TemporalGraph::new(Tensor::from_vec(n, d, feats), labels, events)?;
    let tasks = (0..cfg.tasks)
        .map(|j| TaskSpec {
            task_id: j,
            classes: (j * cfg.classes_per_task..(j + 1) * cfg.classes_per_task).collect(),
            t_start: j as f64 * cfg.window,
            t_end: (j + 1) as f64 * cfg.window,
        })
        .collect();
    Dataset::new(graph, tasks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub task_id: usize,
    pub classes: Vec<ClassId>,
    pub nodes: usize,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub nodes: usize,
    pub events: usize,
    pub classes: usize,
    pub tasks: Vec<TaskStats>,
    pub cross_class_fraction: f64,
    pub closed_triads: usize,
    pub open_triads: usize,
}

/// Counts over the whole dataset; triads use every node and every event.
pub fn stats(data: &Dataset) -> DatasetStats {
    let g = &data.graph;
    let cross = g.events().iter().filter(|e| g.label(e.src) != g.label(e.dst)).count();
    let (mut closed, mut open) = (0, 0);
    let classes: BTreeSet<ClassId> = g.labels().iter().copied().collect();
    for &c in &classes {
        let t = enumerate_triads(g, c, |_| true, f64::INFINITY);
        closed += t.closed.len();
        open += t.open.len();
    }
    DatasetStats {
        nodes: g.node_count(),
        events: g.events().len(),
        classes: classes.len(),
        tasks: data
            .tasks
            .iter()
            .enumerate()
            .map(|(j, t)| TaskStats {
                task_id: t.task_id,
                classes: t.classes.clone(),
                nodes: data.task_nodes(j).len(),
                events: data.task_events(j).len(),
            })
            .collect(),
        cross_class_fraction: if g.events().is_empty() {
            0.0
        } else {
            cross as f64 / g.events().len() as f64
        },
        closed_triads: closed,
        open_triads: open,
    }
}
