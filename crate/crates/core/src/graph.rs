//! Temporal event graph, task partition and node splits.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use otg_diff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type ClassId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub classes: Vec<ClassId>,
    pub t_start: f64,
    pub t_end: f64,
}

impl TaskSpec {
    pub fn contains_time(&self, t: f64) -> bool {
        t >= self.t_start && t < self.t_end
    }
}

/// How neighbors are picked when more than `k` are available.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Sampling {
    /// The `k` most recent distinct neighbors.
    #[default]
    Recent,
    /// `k` distinct neighbors drawn uniformly; the draw depends only on
    /// `(seed, node, t)`.
    Uniform { seed: u64 },
}

/// Immutable interaction graph. Node ids are `0..node_count`.
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    features: Tensor<f64>,
    labels: Vec<ClassId>,
    events: Vec<TemporalEdge>,
    // (time, neighbor), sorted by time then by neighbor descending so a
    // backward scan yields newest first with ties in ascending id order.
    adjacency: Vec<Vec<(f64, NodeId)>>,
}

fn event_order(a: &TemporalEdge, b: &TemporalEdge) -> std::cmp::Ordering {
    a.t.total_cmp(&b.t).then(a.src.cmp(&b.src)).then(a.dst.cmp(&b.dst))
}

impl TemporalGraph {
    /// Builds a graph, sorting `events` and validating every invariant.
    pub fn new(features: Tensor<f64>, labels: Vec<ClassId>, mut events: Vec<TemporalEdge>) -> Result<Self> {
        let n = labels.len();
        if features.rows() != n {
            return Err(Error::Integrity(format!(
                "{} feature rows for {n} labelled nodes",
                features.rows()
            )));
        }
        if !features.all_finite() {
            return Err(Error::Integrity("non-finite node feature".into()));
        }
        for e in &events {
            if e.src >= n || e.dst >= n {
                return Err(Error::Integrity(format!(
                    "event ({}, {}, {}) references a node outside 0..{n}",
                    e.src, e.dst, e.t
                )));
            }
            if e.src == e.dst {
                return Err(Error::Integrity(format!("self-loop on node {} at t={}", e.src, e.t)));
            }
            if !e.t.is_finite() {
                return Err(Error::Integrity(format!(
                    "non-finite timestamp on ({}, {})",
                    e.src, e.dst
                )));
            }
        }
        events.sort_by(event_order);
        let mut adjacency = vec![Vec::new(); n];
        for e in &events {
            adjacency[e.src].push((e.t, e.dst));
            adjacency[e.dst].push((e.t, e.src));
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        }
        Ok(Self {
            features,
            labels,
            events,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn label(&self, i: NodeId) -> ClassId {
        self.labels[i]
    }

    pub fn events(&self) -> &[TemporalEdge] {
        &self.events
    }

    /// Every interaction of `i` as `(time, neighbor)`, oldest first.
    pub fn interactions(&self, i: NodeId) -> &[(f64, NodeId)] {
        &self.adjacency[i]
    }

    /// Time of the last interaction of `i` strictly before `t`.
    pub fn last_interaction_before(&self, i: NodeId, t: f64) -> Option<f64> {
        let list = &self.adjacency[i];
        let end = list.partition_point(|&(s, _)| s < t);
        (end > 0).then(|| list[end - 1].0)
    }

    /// Distinct neighbors of `i` with an interaction strictly before `t`,
    /// each paired with its latest such interaction time, newest first.
    /// At most `k` are returned; `usize::MAX` means all.
    pub fn neighbors_before(&self, i: NodeId, t: f64, k: usize) -> Vec<(NodeId, f64)> {
        self.neighbors_sampled(i, t, k, Sampling::Recent)
    }

    pub fn neighbors_sampled(&self, i: NodeId, t: f64, k: usize, sampling: Sampling) -> Vec<(NodeId, f64)> {
        if k == 0 {
            return Vec::new();
        }
        let list = &self.adjacency[i];
        let end = list.partition_point(|&(s, _)| s < t);
        let limit = match sampling {
            Sampling::Recent => k,
            Sampling::Uniform { .. } => usize::MAX,
        };
        let mut out: Vec<(NodeId, f64)> = Vec::new();
        let mut seen: HashSet<NodeId> = HashSet::new();
        for &(s, j) in list[..end].iter().rev() {
            if out.len() >= limit {
                break;
            }
            if seen.insert(j) {
                out.push((j, s));
            }
        }
        if let Sampling::Uniform { seed } = sampling {
            if out.len() > k {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64, t.to_bits()));
                let mut idx: Vec<usize> = (0..out.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(k);
                idx.sort_unstable();
                out = idx.into_iter().map(|p| out[p]).collect();
            }
        }
        out
    }

    /// Most frequent label among train-split neighbors of `i` seen strictly
    /// before `t`; ties go to the smaller class id.
    pub fn majority_train_label(&self, i: NodeId, t: f64, split: &NodeSplit) -> Option<ClassId> {
        let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
        for (j, _) in self.neighbors_before(i, t, usize::MAX) {
            if split.kind(j) == SplitKind::Train {
                *counts.entry(self.labels[j]).or_default() += 1;
            }
        }
        let mut best: Option<(ClassId, usize)> = None;
        for (c, n) in counts {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| c)
    }
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A graph with its task sequence.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: TemporalGraph,
    pub tasks: Vec<TaskSpec>,
    class_task: BTreeMap<ClassId, usize>,
}

impl Dataset {
    pub fn new(graph: TemporalGraph, tasks: Vec<TaskSpec>) -> Result<Self> {
        let mut class_task = BTreeMap::new();
        for (pos, task) in tasks.iter().enumerate() {
            if task.task_id != pos {
                return Err(Error::Integrity(format!(
                    "task at position {pos} has id {}",
                    task.task_id
                )));
            }
            if !(task.t_start < task.t_end) {
                return Err(Error::Integrity(format!("task {pos} has an empty window")));
            }
            if pos > 0 && task.t_start < tasks[pos - 1].t_end {
                return Err(Error::Integrity(format!(
                    "task {pos} window overlaps or precedes task {}",
                    pos - 1
                )));
            }
            if task.classes.is_empty() {
                return Err(Error::Integrity(format!("task {pos} has no classes")));
            }
            for &c in &task.classes {
                if class_task.insert(c, pos).is_some() {
                    return Err(Error::Integrity(format!("class {c} belongs to two tasks")));
                }
            }
        }
        for (i, &y) in graph.labels().iter().enumerate() {
            if !class_task.contains_key(&y) {
                return Err(Error::Integrity(format!("node {i} has label {y} outside every task")));
            }
        }
        Ok(Self {
            graph,
            tasks,
            class_task,
        })
    }

    /// m(t_m): one past the largest class id.
    pub fn num_classes(&self) -> usize {
        self.class_task.keys().next_back().map_or(0, |c| c + 1)
    }

    pub fn task_of_class(&self, c: ClassId) -> usize {
        self.class_task[&c]
    }

    pub fn task_of_node(&self, i: NodeId) -> usize {
        self.class_task[&self.graph.label(i)]
    }

    /// Nodes whose class belongs to task `j`, ascending.
    pub fn task_nodes(&self, j: usize) -> Vec<NodeId> {
        (0..self.graph.node_count())
            .filter(|&i| self.task_of_node(i) == j)
            .collect()
    }

    /// Events inside task `j`'s window, in time order.
    pub fn task_events(&self, j: usize) -> &[TemporalEdge] {
        let task = &self.tasks[j];
        let ev = self.graph.events();
        let lo = ev.partition_point(|e| e.t < task.t_start);
        let hi = ev.partition_point(|e| e.t < task.t_end);
        &ev[lo..hi]
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_graph(&dir.join("nodes.csv"), &dir.join("events.csv"), &dir.join("tasks.json"))
    }

    /// Writes `nodes.csv`, `events.csv` and `tasks.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("nodes.csv"), &nodes_csv(&self.graph))?;
        write_file(&dir.join("events.csv"), &events_csv(&self.graph))?;
        let tasks = serde_json::to_string_pretty(&self.tasks).expect("tasks serialize");
        write_file(&dir.join("tasks.json"), &(tasks + "\n"))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn nodes_csv(g: &TemporalGraph) -> String {
    let mut s = String::from("node_id,label");
    for f in 0..g.feature_dim() {
        s.push_str(&format!(",feat_{f}"));
    }
    s.push('\n');
    for i in 0..g.node_count() {
        s.push_str(&format!("{i},{}", g.label(i)));
        for &x in g.features().row_slice(i) {
            s.push_str(&format!(",{x}"));
        }
        s.push('\n');
    }
    s
}

pub fn events_csv(g: &TemporalGraph) -> String {
    let mut s = String::from("src,dst,timestamp\n");
    for e in g.events() {
        s.push_str(&format!("{},{},{}\n", e.src, e.dst, e.t));
    }
    s
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad {what} {field:?}"),
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("{other:?}"),
            },
        })
}

fn record_line(
    path: &Path,
    rec: std::result::Result<csv::StringRecord, csv::Error>,
) -> Result<(usize, csv::StringRecord)> {
    match rec {
        Ok(r) => {
            let line = r.position().map_or(0, |p| p.line() as usize);
            Ok((line, r))
        }
        Err(e) => {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })
        }
    }
}

/// Loads the three dataset files.
pub fn load_graph(nodes_path: &Path, events_path: &Path, tasks_path: &Path) -> Result<Dataset> {
    let mut rdr = csv_reader(nodes_path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            path: nodes_path.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.len() < 2 || header.get(0) != Some("node_id") || header.get(1) != Some("label") {
        return Err(Error::Parse {
            path: nodes_path.to_path_buf(),
            line: 1,
            msg: "header must start with node_id,label".into(),
        });
    }
    let dim = header.len() - 2;
    let mut rows: BTreeMap<NodeId, (ClassId, Vec<f64>)> = BTreeMap::new();
    for rec in rdr.records() {
        let (line, r) = record_line(nodes_path, rec)?;
        if r.len() != dim + 2 {
            return Err(Error::Parse {
                path: nodes_path.to_path_buf(),
                line,
                msg: format!("expected {} fields, found {}", dim + 2, r.len()),
            });
        }
        let id: NodeId = parse_field(nodes_path, line, &r[0], "node id")?;
        let label: ClassId = parse_field(nodes_path, line, &r[1], "label")?;
        let feats = (2..r.len())
            .map(|c| parse_field(nodes_path, line, &r[c], "feature"))
            .collect::<Result<Vec<f64>>>()?;
        if rows.insert(id, (label, feats)).is_some() {
            return Err(Error::Integrity(format!("node {id} listed twice")));
        }
    }
    let n = rows.len();
    if let Some((&last, _)) = rows.iter().next_back() {
        if last != n - 1 {
            return Err(Error::Integrity(format!("node ids must be 0..{n}, found id {last}")));
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * dim);
    for (_, (label, feats)) in rows {
        labels.push(label);
        data.extend(feats);
    }
    let features = Tensor::from_vec(n, dim, data);

    let mut rdr = csv_reader(events_path)?;
    let mut events = Vec::new();
    for rec in rdr.records() {
        let (line, r) = record_line(events_path, rec)?;
        if r.len() != 3 {
            return Err(Error::Parse {
                path: events_path.to_path_buf(),
                line,
                msg: format!("expected 3 fields, found {}", r.len()),
            });
        }
        events.push(TemporalEdge {
            src: parse_field(events_path, line, &r[0], "src")?,
            dst: parse_field(events_path, line, &r[1], "dst")?,
            t: parse_field(events_path, line, &r[2], "timestamp")?,
        });
    }

    let text = fs::read_to_string(tasks_path).map_err(|e| Error::io(tasks_path, e))?;
    let tasks: Vec<TaskSpec> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: tasks_path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let graph = TemporalGraph::new(features, labels, events)?;
    Dataset::new(graph, tasks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// Train/val/test assignment of every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeSplit {
    kinds: Vec<SplitKind>,
}

/// Contents of `split.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Random { seed: u64, fractions: [f64; 3] },
    Explicit { assignment: BTreeMap<NodeId, SplitKind> },
}

impl NodeSplit {
    /// Per task, shuffles the task's nodes and cuts them into
    /// `round(f0·n)` train, `round(f1·n)` val and the rest test.
    pub fn random(data: &Dataset, seed: u64, fractions: [f64; 3]) -> Result<Self> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {fractions:?} must be in [0,1] and sum to 1"
            )));
        }
        let mut kinds = vec![SplitKind::Test; data.graph.node_count()];
        for j in 0..data.tasks.len() {
            let mut nodes = data.task_nodes(j);
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, j as u64, 0x5EED));
            nodes.shuffle(&mut rng);
            let n = nodes.len() as f64;
            let n_train = (fractions[0] * n).round() as usize;
            let n_val = ((fractions[1] * n).round() as usize).min(nodes.len() - n_train);
            for (pos, &i) in nodes.iter().enumerate() {
                kinds[i] = if pos < n_train {
                    SplitKind::Train
                } else if pos < n_train + n_val {
                    SplitKind::Val
                } else {
                    SplitKind::Test
                };
            }
        }
        Ok(Self { kinds })
    }

    pub fn from_spec(data: &Dataset, spec: &SplitSpec) -> Result<Self> {
        match spec {
            SplitSpec::Random { seed, fractions } => Self::random(data, *seed, *fractions),
            SplitSpec::Explicit { assignment } => {
                let n = data.graph.node_count();
                let mut kinds = Vec::with_capacity(n);
                for i in 0..n {
                    let k = assignment
                        .get(&i)
                        .ok_or_else(|| Error::Integrity(format!("split has no entry for node {i}")))?;
                    kinds.push(*k);
                }
                Ok(Self { kinds })
            }
        }
    }

    pub fn from_kinds(kinds: Vec<SplitKind>) -> Self {
        Self { kinds }
    }

    pub fn load(path: &Path, data: &Dataset) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SplitSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: PathBuf::from(path),
            line: e.line(),
            msg: e.to_string(),
        })?;
        Self::from_spec(data, &spec)
    }

    pub fn kind(&self, i: NodeId) -> SplitKind {
        self.kinds[i]
    }

    pub fn kinds(&self) -> &[SplitKind] {
        &self.kinds
    }

    /// Nodes of task `j` in split `kind`, ascending.
    pub fn nodes(&self, data: &Dataset, j: usize, kind: SplitKind) -> Vec<NodeId> {
        data.task_nodes(j)
            .into_iter()
            .filter(|&i| self.kinds[i] == kind)
            .collect()
    }
}
