//! Stage-by-stage training with triad replay.
//!
//! Each batch first updates the IB critic, variational head and encoder,
//! then takes one step on `L = L_ce + ρ·L_link` over the message-passing
//! weights and the classifier. After a task's epochs, closed and open
//! triads of each new class are scored and added to the replay memory.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use otg_diff::{value_and_grad, Bound, LossFn, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ClassId, Dataset, NodeId, NodeSplit, SplitKind};
use crate::ib::{cross_entropy, ib_step, IbBatch, IbOptimizers};
use crate::influence::{item_scores, CgOptions, HeadItems, InfluenceScope};
use crate::metrics::{accuracy, AccuracyMatrix};
use crate::model::{selector, GateMode, Model, ModelConfig, Plan};
use crate::optim::Adam;
use crate::select::{greedy, lazy_greedy, median_pairwise_distance, top_k_positive, Coverage, DeltaMode};
use crate::triad::{enumerate_triads, Triad, TriadKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Influence,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Events per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub ib_lr: f64,
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: DeltaMode,
    /// Triads kept per class and kind.
    pub m: usize,
    /// Candidates kept per class and kind before greedy selection.
    pub k: usize,
    pub lambda: f64,
    /// Rows per IB batch.
    pub ib_batch: usize,
    pub ib_steps: usize,
    pub l_steps: usize,
    pub seed: u64,
    pub selection: SelectionMode,
    /// Class-aware gating with the IB encoder.
    pub ib: bool,
    pub lazy: bool,
    pub influence_scope: InfluenceScope,
    pub cg: CgOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 200,
            lr: 0.005,
            ib_lr: 0.001,
            rho: 0.1,
            beta: 1.0,
            gamma: 1.0,
            delta: DeltaMode::Median,
            m: 10,
            k: 1000,
            lambda: 0.01,
            ib_batch: 64,
            ib_steps: 1,
            l_steps: 1,
            seed: 0,
            selection: SelectionMode::Influence,
            ib: true,
            lazy: true,
            influence_scope: InfluenceScope::Head,
            cg: CgOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("ib_lr", self.ib_lr),
            ("ib_batch", self.ib_batch as f64 - 1.0),
            ("k", self.k as f64),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} out of range")));
            }
        }
        let nonneg = [
            ("rho", self.rho),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if let DeltaMode::Fixed(d) = self.delta {
            if !(d >= 0.0) {
                return Err(Error::Config("delta must be non-negative".into()));
            }
        }
        Ok(())
    }

    fn gate<'a>(&self, split: &'a NodeSplit) -> GateMode<'a> {
        if self.ib {
            GateMode::MajorityProxy(split)
        } else {
            GateMode::Off
        }
    }
}

/// Selected triads of every finished class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TriadMemory {
    pub triads: Vec<Triad>,
}

impl TriadMemory {
    pub fn len(&self) -> usize {
        self.triads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triads.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.triads.iter().map(|t| t.class).collect()
    }

    pub fn of(&self, class: ClassId, kind: TriadKind) -> impl Iterator<Item = &Triad> {
        self.triads.iter().filter(move |t| t.class == class && t.kind == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("memory serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            path: "memory.json".into(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

/// `-(1/N_c)Σ log σ(d_c) - (1/N_o)Σ log(1 - σ(d_o))` over precomputed dot
/// products; an empty side contributes zero.
pub fn link_loss_value(closed: &[f64], open: &[f64]) -> f64 {
    let ls = |x: f64| {
        if x >= 0.0 {
            -(-x).exp().ln_1p()
        } else {
            x - x.exp().ln_1p()
        }
    };
    let mut l = 0.0;
    if !closed.is_empty() {
        l -= closed.iter().map(|&d| ls(d)).sum::<f64>() / closed.len() as f64;
    }
    if !open.is_empty() {
        l -= open.iter().map(|&d| ls(-d)).sum::<f64>() / open.len() as f64;
    }
    l
}

/// `L_link` on the tape from embedding rows.
pub fn link_loss<T: Scalar>(
    tape: &mut Tape<T>,
    emb: Var,
    closed: &[(usize, usize)],
    open: &[(usize, usize)],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (pairs, sign) in [(closed, 1.0), (open, -1.0)] {
        if pairs.is_empty() {
            continue;
        }
        let a = tape.gather_rows(emb, pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
        let b = tape.gather_rows(emb, pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
        let prod = tape.mul(a, b)?;
        let dots = tape.sum_cols(prod)?;
        let dots = tape.scale(dots, sign)?;
        let ls = tape.log_sigmoid(dots)?;
        let m = tape.mean(ls)?;
        let term = tape.scale(m, -1.0)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(T::zero()))?),
    }
}

/// One batch of `L = L_ce + ρ·L_link`.
pub struct TaskLoss<'a> {
    pub model: &'a Model,
    pub data: &'a Dataset,
    pub plan: &'a Plan,
    /// Query rows entering the cross-entropy and their target columns.
    pub ce_rows: Vec<usize>,
    pub targets: Vec<usize>,
    pub closed: Vec<(usize, usize)>,
    pub open: Vec<(usize, usize)>,
    pub seen: &'a [ClassId],
    pub rho: f64,
}

impl TaskLoss<'_> {
    pub fn build_inner<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> Result<Var> {
        let f = self.model.embed(tape, p, &self.data.graph, self.plan)?;
        let rows = tape.gather_rows(f.out, self.ce_rows.clone())?;
        let logits = self.model.logits(tape, p, rows, self.seen)?;
        let ce = cross_entropy(tape, logits, &self.targets)?;
        if self.rho == 0.0 || (self.closed.is_empty() && self.open.is_empty()) {
            return Ok(ce);
        }
        let link = link_loss(tape, f.out, &self.closed, &self.open)?;
        let link = tape.scale(link, self.rho)?;
        Ok(tape.add(ce, link)?)
    }
}

impl LossFn for TaskLoss<'_> {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> otg_diff::Result<Var> {
        self.build_inner(tape, p).map_err(|e| match e {
            Error::Diff(d) => d,
            other => otg_diff::DiffError::Invalid {
                op: "task loss",
                msg: other.to_string(),
            },
        })
    }
}

/// Queries, targets and replay pairs of one batch.
#[derive(Clone, Debug, Default)]
pub struct BatchSpec {
    pub queries: Vec<(NodeId, f64)>,
    pub labels: Vec<ClassId>,
    pub closed: Vec<(usize, usize)>,
    pub open: Vec<(usize, usize)>,
}

impl BatchSpec {
    /// Train-split endpoints of current-class events, each at its latest
    /// event time in the batch, followed by every memory triad's nodes at
    /// the batch's last time.
    pub fn build(
        data: &Dataset,
        split: &NodeSplit,
        events: &[crate::graph::TemporalEdge],
        classes: &BTreeSet<ClassId>,
        memory: &TriadMemory,
    ) -> Self {
        let mut latest: BTreeMap<NodeId, f64> = BTreeMap::new();
        for e in events {
            for n in [e.src, e.dst] {
                if split.kind(n) == SplitKind::Train && classes.contains(&data.graph.label(n)) {
                    let t = latest.entry(n).or_insert(e.t);
                    *t = t.max(e.t);
                }
            }
        }
        let mut spec = BatchSpec::default();
        for (&n, &t) in &latest {
            spec.queries.push((n, t));
            spec.labels.push(data.graph.label(n));
        }
        let t_b = events.last().map_or(0.0, |e| e.t);
        let mut row_of: BTreeMap<NodeId, usize> = BTreeMap::new();
        for tr in &memory.triads {
            let rows: Vec<usize> = tr
                .nodes()
                .iter()
                .map(|&n| {
                    *row_of.entry(n).or_insert_with(|| {
                        spec.queries.push((n, t_b));
                        spec.labels.push(data.graph.label(n));
                        spec.queries.len() - 1
                    })
                })
                .collect();
            match tr.kind {
                TriadKind::Closed => spec.closed.push((rows[1], rows[2])),
                TriadKind::Open => spec.open.push((rows[1], rows[2])),
            }
        }
        spec
    }
}

/// Per-class selection summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: ClassId,
    pub closed_found: usize,
    pub open_found: usize,
    pub closed_candidates: usize,
    pub open_candidates: usize,
    pub closed_selected: usize,
    pub open_selected: usize,
    pub scope: Option<InfluenceScope>,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    pub task_id: usize,
    /// Mean `L` over the batches of each epoch.
    pub epoch_loss: Vec<f64>,
    pub epoch_ib: Vec<f64>,
    pub selection: Vec<ClassSelection>,
    /// Seconds spent in coverage construction and greedy selection.
    pub selection_seconds: f64,
    pub train_seconds: f64,
    pub test_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub unknown_labels: usize,
}

/// Classes of tasks `0..=upto`, ascending.
pub fn seen_classes(data: &Dataset, upto: usize) -> Vec<ClassId> {
    let mut v: Vec<ClassId> = data.tasks[..=upto]
        .iter()
        .flat_map(|t| t.classes.iter().copied())
        .collect();
    v.sort_unstable();
    v
}

/// Accuracy on the `kind` nodes of each task `0..=upto`, queried at the end
/// of task `upto`'s window.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    split: &NodeSplit,
    upto: usize,
    gate: GateMode,
    kind: SplitKind,
) -> Result<Vec<f64>> {
    let seen = seen_classes(data, upto);
    let t = data.tasks[upto].t_end;
    (0..=upto)
        .into_par_iter()
        .map(|j| {
            let nodes = split.nodes(data, j, kind);
            let queries: Vec<(NodeId, f64)> = nodes.iter().map(|&n| (n, t)).collect();
            let pred = model.predict(&data.graph, &queries, gate, &seen)?;
            let truth: Vec<ClassId> = nodes.iter().map(|&n| data.graph.label(n)).collect();
            accuracy(&pred, &truth)
        })
        .collect()
}

/// Serializable RNG position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Sequential trainer over the tasks of a dataset.
pub struct Trainer<'a> {
    pub data: &'a Dataset,
    pub split: &'a NodeSplit,
    pub config: TrainConfig,
    pub model: Model,
    pub memory: TriadMemory,
    pub accuracy: AccuracyMatrix,
    pub logs: Vec<StageLog>,
    opt: Adam,
    ib_opt: IbOptimizers,
    rng: ChaCha8Rng,
    seen: BTreeSet<ClassId>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a Dataset,
        split: &'a NodeSplit,
        model_config: ModelConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, data.graph.feature_dim(), data.num_classes(), config.seed)?;
        let mut ids = model.mp_ids();
        ids.extend(model.head_ids());
        let opt = Adam::new(&model.store, ids, config.lr);
        let ib_opt = IbOptimizers::new(&model, config.ib_lr);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(Self {
            data,
            split,
            config,
            model,
            memory: TriadMemory::default(),
            accuracy: AccuracyMatrix::new(),
            logs: Vec::new(),
            opt,
            ib_opt,
            rng,
            seen: BTreeSet::new(),
        })
    }

    pub fn stage(&self) -> usize {
        self.logs.len()
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn run(&mut self) -> Result<()> {
        while self.stage() < self.data.tasks.len() {
            self.train_stage()?;
        }
        Ok(())
    }

    /// Trains the next task, selects its triads and evaluates every task so
    /// far.
    pub fn train_stage(&mut self) -> Result<&StageLog> {
        let j = self.stage();
        let task = self
            .data
            .tasks
            .get(j)
            .ok_or_else(|| Error::Invalid("all tasks already trained".into()))?;
        let classes: BTreeSet<ClassId> = task.classes.iter().copied().collect();
        if let Some(c) = classes
            .iter()
            .find(|c| self.seen.contains(c) || self.memory.classes().contains(c))
        {
            return Err(Error::Invalid(format!(
                "class {c} of task {} was already trained",
                task.task_id
            )));
        }
        self.seen.extend(classes.iter().copied());
        let seen: Vec<ClassId> = self.seen.iter().copied().collect();
        let col_of: BTreeMap<ClassId, usize> = seen.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        let mut log = StageLog {
            stage: j + 1,
            task_id: task.task_id,
            ..Default::default()
        };
        let started = Instant::now();
        let events = self.data.task_events(j);
        for _ in 0..self.config.epochs {
            let (mut loss_sum, mut ib_sum, mut n) = (0.0, 0.0, 0usize);
            for chunk in events.chunks(self.config.batch_size) {
                let spec = BatchSpec::build(self.data, self.split, chunk, &classes, &self.memory);
                if spec.queries.is_empty() {
                    continue;
                }
                let (l, ib, unknown) = self.train_batch(&spec, &seen, &col_of)?;
                loss_sum += l;
                ib_sum += ib;
                n += 1;
                log.unknown_labels += unknown;
            }
            log.epoch_loss.push(if n > 0 { loss_sum / n as f64 } else { 0.0 });
            log.epoch_ib.push(if n > 0 { ib_sum / n as f64 } else { 0.0 });
        }
        log.train_seconds = started.elapsed().as_secs_f64();

        if self.config.m > 0 {
            for &c in &classes {
                let out = select_class(&self.model, self.data, self.split, &self.config, j, c)?;
                self.memory.triads.extend(out.triads);
                log.selection.push(out.summary);
                log.selection_seconds += out.seconds;
            }
        }

        let gate = self.config.gate(self.split);
        log.test_accuracy = evaluate(&self.model, self.data, self.split, j, gate, SplitKind::Test)?;
        log.val_accuracy = evaluate(&self.model, self.data, self.split, j, gate, SplitKind::Val).unwrap_or_default();
        self.accuracy.push(log.test_accuracy.clone())?;
        log::info!(
            "stage {} done: loss {:.4} -> {:.4}, test {:?}",
            j + 1,
            log.epoch_loss.first().copied().unwrap_or(0.0),
            log.epoch_loss.last().copied().unwrap_or(0.0),
            log.test_accuracy
        );
        self.logs.push(log);
        Ok(self.logs.last().expect("just pushed"))
    }

    fn train_batch(
        &mut self,
        spec: &BatchSpec,
        seen: &[ClassId],
        col_of: &BTreeMap<ClassId, usize>,
    ) -> Result<(f64, f64, usize)> {
        let gate = self.config.gate(self.split);
        let plan = Plan::build(&self.data.graph, &self.model.config, &spec.queries, gate);
        let mut ib_value = 0.0;
        if self.config.ib && self.config.ib_steps > 0 {
            let batch = self.ib_batch(&plan, spec)?;
            if let Some(batch) = batch {
                for _ in 0..self.config.ib_steps {
                    ib_value = ib_step(&mut self.model, &batch, self.config.beta, &mut self.ib_opt)?.ib;
                }
            }
        }
        let mut l_value = 0.0;
        for _ in 0..self.config.l_steps {
            let grad = {
                let loss = TaskLoss {
                    model: &self.model,
                    data: self.data,
                    plan: &plan,
                    ce_rows: (0..spec.queries.len()).collect(),
                    targets: spec.labels.iter().map(|c| col_of[c]).collect(),
                    closed: spec.closed.clone(),
                    open: spec.open.clone(),
                    seen,
                    rho: self.config.rho,
                };
                let (v, g) = value_and_grad(&loss, &self.model.store)?;
                l_value = v;
                g
            };
            self.opt.step(&mut self.model.store, &grad);
        }
        Ok((l_value, ib_value, plan.unknown_labels))
    }

    /// Inputs of the last attention layer at the query rows, subsampled to
    /// the configured IB batch size.
    fn ib_batch(&mut self, plan: &Plan, spec: &BatchSpec) -> Result<Option<IbBatch>> {
        let mut tape = Tape::<f64>::new();
        let p = tape.bind_frozen(&self.model.store)?;
        let f = self.model.embed(&mut tape, &p, &self.data.graph, plan)?;
        let last = plan.layers.len() - 1;
        let x_all = tape.value(f.inputs[last]);
        let rows = &plan.layers[last].self_prev;
        let n = spec.queries.len();
        if n < 2 {
            return Ok(None);
        }
        let pick: Vec<usize> = if n > self.config.ib_batch {
            let mut v = sample(&mut self.rng, n, self.config.ib_batch).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let d = x_all.cols();
        let mut data = Vec::with_capacity(pick.len() * d);
        for &q in &pick {
            data.extend_from_slice(x_all.row_slice(rows[q]));
        }
        let y = pick.iter().map(|&q| spec.labels[q]).collect();
        Ok(Some(IbBatch::new(Tensor::from_vec(pick.len(), d, data), y)?))
    }
}

/// Result of [`select_class`].
#[derive(Clone, Debug)]
pub struct ClassOutcome {
    pub triads: Vec<Triad>,
    pub summary: ClassSelection,
    pub seconds: f64,
}

/// Triads kept for `class` of task `j`, scored with `model`. Random
/// selection draws from a generator seeded by `(seed, class)` only.
pub fn select_class(
    model: &Model,
    data: &Dataset,
    split: &NodeSplit,
    config: &TrainConfig,
    j: usize,
    class: ClassId,
) -> Result<ClassOutcome> {
    let seen = seen_classes(data, j);
    let seen = &seen[..];
    let cutoff = data.tasks[j].t_end;
    let found = enumerate_triads(&data.graph, class, |i| split.kind(i) == SplitKind::Train, cutoff);
    let mut sel = ClassSelection {
        class,
        closed_found: found.closed.len(),
        open_found: found.open.len(),
        ..Default::default()
    };
    let m = config.m;
    let mut triads = Vec::new();
    if config.selection == SelectionMode::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (class as u64).wrapping_mul(0xa076_1d64_78bd_642f));
        for (list, kind) in [(&found.closed, TriadKind::Closed), (&found.open, TriadKind::Open)] {
            let mut idx = sample(&mut rng, list.len(), m.min(list.len())).into_vec();
            idx.sort_unstable();
            for i in idx {
                triads.push(list[i].clone());
            }
            let n = m.min(list.len());
            match kind {
                TriadKind::Closed => sel.closed_selected = n,
                TriadKind::Open => sel.open_selected = n,
            }
        }
        return Ok(ClassOutcome {
            triads,
            summary: sel,
            seconds: 0.0,
        });
    }

    let fit_nodes = split.nodes(data, j, SplitKind::Train);
    let t = cutoff;
    let gate = config.gate(split);
    let queries: Vec<(NodeId, f64)> = fit_nodes.iter().map(|&n| (n, t)).collect();
    let emb = model.embed_values(&data.graph, &queries, gate)?;
    let row_of: BTreeMap<NodeId, usize> = fit_nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let col_of: BTreeMap<ClassId, usize> = seen.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let targets: Vec<usize> = fit_nodes.iter().map(|&n| col_of[&data.graph.label(n)]).collect();
    let class_items: Vec<usize> = (0..fit_nodes.len())
        .filter(|&i| data.graph.label(fit_nodes[i]) == class)
        .collect();
    let all: Vec<usize> = (0..fit_nodes.len()).collect();
    let sel_matrix = selector(model.num_classes, seen);

    let mut scores = None;
    let scopes: &[InfluenceScope] = match config.influence_scope {
        InfluenceScope::Head => &[InfluenceScope::Head, InfluenceScope::HeadOutput],
        InfluenceScope::HeadOutput => &[InfluenceScope::HeadOutput],
    };
    for &scope in scopes {
        let x = match scope {
            InfluenceScope::Head => emb.clone(),
            InfluenceScope::HeadOutput => HeadItems::hidden(&model.store, &model.head, &emb)?,
        };
        let items = HeadItems {
            x,
            targets: targets.clone(),
            selector: sel_matrix.clone(),
            scope,
        };
        let params = HeadItems::params(&model.store, &model.head, scope);
        match item_scores(&items, &params, &all, 0.0, &class_items, config.lambda, config.cg) {
            Ok(s) => {
                sel.scope = Some(scope);
                sel.lambda = Some(s.lambda);
                scores = Some(s.r);
                break;
            }
            Err(e) => log::warn!("influence with scope {scope:?} failed for class {class}: {e}"),
        }
    }
    let r_node = scores.ok_or_else(|| Error::Convergence(format!("influence solve failed for class {class}")))?;

    let mut secs = 0.0;
    for (list, kind) in [(found.closed, TriadKind::Closed), (found.open, TriadKind::Open)] {
        let r: Vec<f64> = list
            .iter()
            .map(|t| t.nodes().iter().map(|n| r_node[row_of[n]]).sum())
            .collect();
        let t0 = Instant::now();
        let cand = top_k_positive(&r, config.k);
        let points: Vec<Vec<f64>> = cand
            .iter()
            .map(|&c| mean_embedding(&emb, &list[c].nodes().map(|n| row_of[&n])))
            .collect();
        let delta = match config.delta {
            DeltaMode::Median => median_pairwise_distance(&points),
            DeltaMode::Fixed(d) => d,
        };
        let cov = Coverage::build(&points, delta);
        let cand_r: Vec<f64> = cand.iter().map(|&c| r[c]).collect();
        let picked = if config.lazy {
            lazy_greedy(&cand_r, &cov, config.gamma, m)
        } else {
            greedy(&cand_r, &cov, config.gamma, m)
        };
        secs += t0.elapsed().as_secs_f64();
        if cand.len() < m {
            log::warn!(
                "class {class}: only {} positive {kind:?} candidates for M = {m}",
                cand.len()
            );
        }
        for &ci in &picked.chosen {
            let mut tr = list[cand[ci]].clone();
            tr.r = r[cand[ci]];
            triads.push(tr);
        }
        match kind {
            TriadKind::Closed => {
                sel.closed_candidates = cand.len();
                sel.closed_selected = picked.chosen.len();
            }
            TriadKind::Open => {
                sel.open_candidates = cand.len();
                sel.open_selected = picked.chosen.len();
            }
        }
    }
    Ok(ClassOutcome {
        triads,
        summary: sel,
        seconds: secs,
    })
}

/// Mean of the given embedding rows.
pub fn mean_embedding(emb: &Tensor<f64>, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; emb.cols()];
    for &r in rows {
        for (o, &x) in out.iter_mut().zip(emb.row_slice(r)) {
            *o += x;
        }
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Model weights, memory and RNG position after a stage.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub memory: TriadMemory,
    pub rng: RngState,
}

impl Trainer<'_> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            store: self.model.store.clone(),
            memory: self.memory.clone(),
            rng: self.rng_state(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_loss_at_zero_dots() {
        let v = link_loss_value(&[0.0], &[0.0]);
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(link_loss_value(&[], &[]), 0.0);
    }

    #[test]
    fn link_loss_tape_matches_values() {
        let emb = Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 3.0, 1.0, -2.0, -1.0]);
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(emb).unwrap();
        let l = link_loss(&mut tape, e, &[(0, 1)], &[(2, 3)]).unwrap();
        let want = link_loss_value(&[0.0], &[-7.0]);
        assert!((tape.scalar(l) - want).abs() < 1e-14);
    }
}
