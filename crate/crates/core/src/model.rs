//! Temporal attention message passing with class-aware gating.
//!
//! Layer `ℓ` computes, for a key `(i, t)`,
//! `x_i = Σ_j a_ij W_h h_j` where the attention logits are
//! `([x_i ‖ Φ(t - t_i)] W_q) · ([h_j ‖ Φ(t - t_j)] W_p)` and `h_j` is the
//! neighbor's previous-layer embedding for same-class pairs or its encoded
//! class-agnostic version otherwise. Layer 0 is a linear projection of the
//! raw node features.

use std::collections::HashMap;
use std::sync::Arc;

use otg_diff::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ClassId, NodeId, NodeSplit, Sampling, SplitKind, TemporalGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub time_dim: usize,
    /// Shared query/key width of `W_q` and `W_p`.
    pub attn_dim: usize,
    pub layers: usize,
    pub neighbors: usize,
    pub head_hidden: usize,
    pub ib_hidden: usize,
    pub critic_hidden: usize,
    pub sampling: Sampling,
    /// Adds the key itself as an extra same-class message.
    pub self_message: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            time_dim: 16,
            attn_dim: 64,
            layers: 2,
            neighbors: 5,
            head_hidden: 128,
            ib_hidden: 100,
            critic_hidden: 64,
            sampling: Sampling::Recent,
            self_message: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("time_dim", self.time_dim),
            ("attn_dim", self.attn_dim),
            ("layers", self.layers),
            ("head_hidden", self.head_hidden),
            ("ib_hidden", self.ib_hidden),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Which labels decide between the raw and the class-agnostic message.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    /// Every pair uses the raw embedding.
    Off,
    /// Ground-truth labels for every node.
    TrueLabels,
    /// Train-split nodes use their label, other nodes the majority label of
    /// their train-split neighbors before the query time.
    MajorityProxy(&'a NodeSplit),
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp2 {
    fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w1])?;
        let h = tape.add(h, p[self.b1])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, p[self.w2])?;
        Ok(tape.add(o, p[self.b2])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub wq: ParamId,
    pub wp: ParamId,
    pub wh: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CriticIds {
    pub wx: ParamId,
    pub wz: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// All learned weights plus the ids locating them in the store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub store: ParamStore,
    pub w_in: ParamId,
    pub omega: ParamId,
    pub phi: ParamId,
    pub layers: Vec<LayerIds>,
    pub head: Mlp2,
    pub encoder: Mlp2,
    pub q_mu: Mlp2,
    pub critic: CriticIds,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

fn add_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, i: usize, h: usize, o: usize) -> Mlp2 {
    Mlp2 {
        w1: store.add(format!("{name}.w1"), glorot(rng, i, h)),
        b1: store.add(format!("{name}.b1"), Tensor::zeros(1, h)),
        w2: store.add(format!("{name}.w2"), glorot(rng, h, o)),
        b2: store.add(format!("{name}.b2"), Tensor::zeros(1, o)),
    }
}

impl Model {
    pub fn new(config: ModelConfig, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let dt = config.time_dim;
        let w_in = store.add("mp.w_in", glorot(&mut rng, feature_dim, d));
        let omega_vals = (0..dt)
            .map(|i| {
                let frac = if dt > 1 { i as f64 / (dt - 1) as f64 } else { 0.0 };
                10f64.powf(-9.0 * frac)
            })
            .collect();
        let omega = store.add("mp.omega", Tensor::row(omega_vals));
        let phi = store.add("mp.phi", Tensor::zeros(1, dt));
        let layers = (0..config.layers)
            .map(|l| LayerIds {
                wq: store.add(format!("mp.l{l}.wq"), glorot(&mut rng, d + dt, config.attn_dim)),
                wp: store.add(format!("mp.l{l}.wp"), glorot(&mut rng, d + dt, config.attn_dim)),
                wh: store.add(format!("mp.l{l}.wh"), glorot(&mut rng, d, d)),
            })
            .collect();
        let head = add_mlp(&mut store, &mut rng, "head", d, config.head_hidden, num_classes);
        let encoder = add_mlp(&mut store, &mut rng, "enc", d, config.ib_hidden, d);
        let q_mu = add_mlp(&mut store, &mut rng, "qmu", d, config.ib_hidden, num_classes);
        let ch = config.critic_hidden;
        let critic = CriticIds {
            wx: store.add("critic.wx", glorot(&mut rng, d, ch)),
            wz: store.add("critic.wz", glorot(&mut rng, d, ch)),
            b1: store.add("critic.b1", Tensor::zeros(1, ch)),
            w2: store.add("critic.w2", glorot(&mut rng, ch, 1)),
            b2: store.add("critic.b2", Tensor::zeros(1, 1)),
        };
        Ok(Self {
            config,
            feature_dim,
            num_classes,
            store,
            w_in,
            omega,
            phi,
            layers,
            head,
            encoder,
            q_mu,
            critic,
        })
    }

    /// Message-passing weights: input projection, time encoder, attention.
    pub fn mp_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w_in, self.omega, self.phi];
        for l in &self.layers {
            v.extend([l.wq, l.wp, l.wh]);
        }
        v
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head.ids().to_vec()
    }

    pub fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.ids().to_vec()
    }

    pub fn q_ids(&self) -> Vec<ParamId> {
        self.q_mu.ids().to_vec()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        let c = self.critic;
        vec![c.wx, c.wz, c.b1, c.w2, c.b2]
    }

    /// `Φ(Δt)` with the current frequencies and phases.
    pub fn time_encode(&self, dt: f64) -> Result<Vec<f64>> {
        time_encode(self.store.get(self.omega).data(), self.store.get(self.phi).data(), dt)
    }

    /// Builds `Φ` for a column of time gaps on the tape.
    pub fn time_codes<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, dts: &[f64]) -> Result<Var> {
        let dt = tape.constant_f64(&Tensor::column(dts.to_vec()))?;
        let arg = tape.matmul(dt, p[self.omega])?;
        let arg = tape.add(arg, p[self.phi])?;
        let c = tape.cos(arg)?;
        Ok(tape.scale(c, (1.0 / self.config.time_dim as f64).sqrt())?)
    }

    /// Runs every layer of `plan` and returns one embedding row per query.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        graph: &TemporalGraph,
        plan: &Plan,
    ) -> Result<Forward> {
        let feats = feature_rows(graph, &plan.base_nodes);
        let x0 = tape.constant_f64(&feats)?;
        let mut prev = tape.matmul(x0, p[self.w_in])?;
        let mut inputs = Vec::with_capacity(plan.layers.len());
        for (lp, ids) in plan.layers.iter().zip(&self.layers) {
            inputs.push(prev);
            prev = self.layer(tape, p, ids, lp, prev)?;
        }
        Ok(Forward { out: prev, inputs })
    }

    fn layer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        ids: &LayerIds,
        lp: &LayerPlan,
        prev: Var,
    ) -> Result<Var> {
        let xq = tape.gather_rows(prev, lp.self_prev.clone())?;
        let tq = self.time_codes(tape, p, &lp.self_dt)?;
        let q_in = tape.concat(xq, tq)?;
        let q = tape.matmul(q_in, p[ids.wq])?;

        let h = if lp.cross_prev.is_empty() {
            tape.gather_rows(prev, lp.pair_prev.clone())?
        } else {
            let same = tape.gather_rows(prev, lp.same_prev.clone())?;
            let xc = tape.gather_rows(prev, lp.cross_prev.clone())?;
            let zc = self.encoder.forward(tape, p, xc)?;
            let stacked = tape.concat_rows(same, zc)?;
            tape.gather_rows(stacked, lp.pair_slot.clone())?
        };
        let tk = self.time_codes(tape, p, &lp.pair_dt)?;
        let k_in = tape.concat(h, tk)?;
        let k = tape.matmul(k_in, p[ids.wp])?;
        let qp = tape.gather_rows(q, lp.owner.clone())?;
        let prod = tape.mul(qp, k)?;
        let scores = tape.sum_cols(prod)?;
        let a = tape.segment_softmax(scores, lp.offsets.clone())?;
        let msg = tape.matmul(h, p[ids.wh])?;
        let weighted = tape.mul_col(msg, a)?;
        Ok(tape.segment_sum(weighted, lp.offsets.clone())?)
    }

    /// Classifier logits restricted to `seen` classes, in that order.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, emb: Var, seen: &[ClassId]) -> Result<Var> {
        let full = self.head.forward(tape, p, emb)?;
        let sel = tape.constant_f64(&selector(self.num_classes, seen))?;
        Ok(tape.matmul(full, sel)?)
    }

    /// Plain `f64` embeddings for `queries` with no gradient tracking.
    pub fn embed_values(
        &self,
        graph: &TemporalGraph,
        queries: &[(NodeId, f64)],
        gate: GateMode,
    ) -> Result<Tensor<f64>> {
        let plan = Plan::build(graph, &self.config, queries, gate);
        let mut tape = Tape::<f64>::new();
        let p = tape.bind_frozen(&self.store)?;
        let f = self.embed(&mut tape, &p, graph, &plan)?;
        Ok(tape.value(f.out).clone())
    }

    /// Argmax class among `seen` for each query.
    pub fn predict(
        &self,
        graph: &TemporalGraph,
        queries: &[(NodeId, f64)],
        gate: GateMode,
        seen: &[ClassId],
    ) -> Result<Vec<ClassId>> {
        let plan = Plan::build(graph, &self.config, queries, gate);
        let mut tape = Tape::<f64>::new();
        let p = tape.bind_frozen(&self.store)?;
        let f = self.embed(&mut tape, &p, graph, &plan)?;
        let logits = self.logits(&mut tape, &p, f.out, seen)?;
        let v = tape.value(logits);
        Ok((0..v.rows())
            .map(|r| {
                let row = v.row_slice(r);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                seen[best]
            })
            .collect())
    }
}

/// Output of [`Model::embed`].
pub struct Forward {
    pub out: Var,
    /// Input matrix of each layer, rows keyed by [`Plan::layer_keys`].
    pub inputs: Vec<Var>,
}

fn feature_rows(graph: &TemporalGraph, nodes: &[NodeId]) -> Tensor<f64> {
    let d = graph.feature_dim();
    let mut data = Vec::with_capacity(nodes.len() * d);
    for &i in nodes {
        data.extend_from_slice(graph.features().row_slice(i));
    }
    Tensor::from_vec(nodes.len(), d, data)
}

/// `C × |seen|` 0/1 matrix picking the seen columns.
pub fn selector(num_classes: usize, seen: &[ClassId]) -> Tensor<f64> {
    let mut s = Tensor::zeros(num_classes, seen.len());
    for (col, &c) in seen.iter().enumerate() {
        s.set(c, col, 1.0);
    }
    s
}

pub fn time_encode(omega: &[f64], phi: &[f64], dt: f64) -> Result<Vec<f64>> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::Invalid(format!("time gap {dt} must be finite and non-negative")));
    }
    let c = (1.0 / omega.len() as f64).sqrt();
    Ok(omega.iter().zip(phi).map(|(w, p)| c * (w * dt + p).cos()).collect())
}

/// Message a neighbor sends: its embedding when the classes agree or the
/// neighbor's class is unknown, its class-agnostic code otherwise.
pub fn gate_message<'a>(x_l: &'a [f64], z_l: &'a [f64], y_i: ClassId, y_l: Option<ClassId>) -> Result<&'a [f64]> {
    if x_l.len() != z_l.len() {
        return Err(Error::Invalid(format!(
            "message dims differ: {} vs {}",
            x_l.len(),
            z_l.len()
        )));
    }
    Ok(match y_l {
        Some(y) if y != y_i => z_l,
        _ => x_l,
    })
}

/// Softmax of `query · key_j` over the keys.
pub fn attention_weights(query: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `Σ_j a_j · (m_j W_h)` with `W_h` given row-major `d × d_out`.
pub fn aggregate(weights: &[f64], messages: &[Vec<f64>], w_h: &Tensor<f64>) -> Vec<f64> {
    let mut out = vec![0.0; w_h.cols()];
    for (a, m) in weights.iter().zip(messages) {
        for (r, &x) in m.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(w_h.row_slice(r)) {
                *o += a * x * w;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub self_prev: Arc<[usize]>,
    pub self_dt: Vec<f64>,
    pub offsets: Arc<[usize]>,
    pub owner: Arc<[usize]>,
    pub pair_prev: Arc<[usize]>,
    pub pair_dt: Vec<f64>,
    pub cross: Vec<bool>,
    same_prev: Arc<[usize]>,
    cross_prev: Arc<[usize]>,
    pair_slot: Arc<[usize]>,
}

/// Precomputed neighborhoods for a batch of `(node, time)` queries.
#[derive(Clone, Debug)]
pub struct Plan {
    pub base_nodes: Vec<NodeId>,
    /// `layers[l]` computes layer `l + 1`.
    pub layers: Vec<LayerPlan>,
    /// Keys of every layer input, `layer_keys[0]` being the base nodes.
    pub layer_keys: Vec<Vec<(NodeId, f64)>>,
    /// Pairs whose neighbor had no label proxy and fell back to the raw
    /// message.
    pub unknown_labels: usize,
}

struct Labeler<'a> {
    graph: &'a TemporalGraph,
    gate: GateMode<'a>,
    cache: HashMap<(NodeId, u64), Option<ClassId>>,
}

impl Labeler<'_> {
    fn label(&mut self, i: NodeId, t: f64) -> Option<ClassId> {
        match self.gate {
            GateMode::Off => None,
            GateMode::TrueLabels => Some(self.graph.label(i)),
            GateMode::MajorityProxy(split) => {
                if split.kind(i) == SplitKind::Train {
                    return Some(self.graph.label(i));
                }
                let graph = self.graph;
                *self
                    .cache
                    .entry((i, t.to_bits()))
                    .or_insert_with(|| graph.majority_train_label(i, t, split))
            }
        }
    }
}

impl Plan {
    pub fn build(graph: &TemporalGraph, config: &ModelConfig, queries: &[(NodeId, f64)], gate: GateMode) -> Plan {
        let mut labeler = Labeler {
            graph,
            gate,
            cache: HashMap::new(),
        };
        let mut unknown = 0;
        let mut keys: Vec<(NodeId, f64)> = queries.to_vec();
        let mut layers_rev = Vec::with_capacity(config.layers);
        let mut keys_rev = Vec::with_capacity(config.layers + 1);
        for _ in 0..config.layers {
            let mut index: HashMap<(NodeId, u64), usize> = HashMap::new();
            let mut prev_keys: Vec<(NodeId, f64)> = Vec::new();
            let mut slot = |key: (NodeId, f64), prev_keys: &mut Vec<(NodeId, f64)>| -> usize {
                *index.entry((key.0, key.1.to_bits())).or_insert_with(|| {
                    prev_keys.push(key);
                    prev_keys.len() - 1
                })
            };
            let mut self_prev = Vec::with_capacity(keys.len());
            let mut self_dt = Vec::with_capacity(keys.len());
            let mut offsets = vec![0];
            let mut owner = Vec::new();
            let mut pair_prev = Vec::new();
            let mut pair_dt = Vec::new();
            let mut cross = Vec::new();
            for (kidx, &(i, t)) in keys.iter().enumerate() {
                let sp = slot((i, t), &mut prev_keys);
                self_prev.push(sp);
                self_dt.push(graph.last_interaction_before(i, t).map_or(0.0, |s| t - s));
                let nbrs = graph.neighbors_sampled(i, t, config.neighbors, config.sampling);
                let y_i = if nbrs.is_empty() { None } else { labeler.label(i, t) };
                for &(j, tj) in &nbrs {
                    owner.push(kidx);
                    pair_prev.push(slot((j, t), &mut prev_keys));
                    pair_dt.push(t - tj);
                    let is_cross = match (y_i, labeler.label(j, t)) {
                        (Some(a), Some(b)) => a != b,
                        _ => {
                            if !matches!(gate, GateMode::Off) {
                                unknown += 1;
                            }
                            false
                        }
                    };
                    cross.push(is_cross);
                }
                if nbrs.is_empty() || config.self_message {
                    owner.push(kidx);
                    pair_prev.push(sp);
                    pair_dt.push(0.0);
                    cross.push(false);
                }
                offsets.push(owner.len());
            }
            let mut same_prev = Vec::new();
            let mut cross_prev = Vec::new();
            let mut slots = Vec::with_capacity(cross.len());
            for (pidx, &c) in cross.iter().enumerate() {
                if c {
                    slots.push((true, cross_prev.len()));
                    cross_prev.push(pair_prev[pidx]);
                } else {
                    slots.push((false, same_prev.len()));
                    same_prev.push(pair_prev[pidx]);
                }
            }
            let n_same = same_prev.len();
            let pair_slot: Vec<usize> = slots.into_iter().map(|(c, s)| if c { n_same + s } else { s }).collect();
            layers_rev.push(LayerPlan {
                self_prev: self_prev.into(),
                self_dt,
                offsets: offsets.into(),
                owner: owner.into(),
                pair_prev: pair_prev.into(),
                pair_dt,
                cross,
                same_prev: same_prev.into(),
                cross_prev: cross_prev.into(),
                pair_slot: pair_slot.into(),
            });
            keys_rev.push(std::mem::replace(&mut keys, prev_keys));
        }
        let base_nodes = keys.iter().map(|k| k.0).collect();
        keys_rev.push(keys);
        layers_rev.reverse();
        keys_rev.reverse();
        keys_rev.pop();
        Plan {
            base_nodes,
            layers: layers_rev,
            layer_keys: keys_rev,
            unknown_labels: unknown,
        }
    }

    pub fn cross_pairs(&self) -> usize {
        self.layers.iter().map(|l| l.cross_prev.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TemporalEdge;

    #[test]
    fn zero_gap_with_zero_phase_is_flat() {
        let v = time_encode(&[1.0, 0.1, 0.01, 0.001], &[0.0; 4], 0.0).unwrap();
        assert!(v.iter().all(|&x| x == 0.5));
        assert!(time_encode(&[1.0], &[0.0], -1.0).is_err());
        let a = time_encode(&[0.0, 0.0], &[0.3, 0.9], 2.0).unwrap();
        assert_eq!(a, time_encode(&[0.0, 0.0], &[0.3, 0.9], 50.0).unwrap());
    }

    #[test]
    fn gate_branches() {
        let x = [1.0, 2.0];
        let z = [3.0, 4.0];
        assert_eq!(gate_message(&x, &z, 2, Some(2)).unwrap(), &x);
        assert_eq!(gate_message(&x, &z, 1, Some(2)).unwrap(), &z);
        assert_eq!(gate_message(&x, &z, 1, None).unwrap(), &x);
        assert!(gate_message(&x, &z[..1], 1, None).is_err());
    }

    #[test]
    fn attention_edge_cases() {
        assert_eq!(attention_weights(&[1.0, 2.0], &[vec![0.3, 0.1]]), vec![1.0]);
        assert_eq!(
            attention_weights(&[1.0, 2.0], &[vec![0.3, 0.1], vec![0.3, 0.1]]),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn aggregate_with_identity() {
        let out = aggregate(&[1.0], &[vec![0.2, -0.4]], &Tensor::identity(2));
        assert_eq!(out, vec![0.2, -0.4]);
        let out = aggregate(
            &[0.5, 0.5],
            &[vec![1.0, 2.0], vec![1.0, 2.0]],
            &Tensor::from_vec(2, 2, vec![1.0, 1.0, 0.0, 2.0]),
        );
        assert_eq!(out, vec![1.0, 5.0]);
    }

    #[test]
    fn plan_marks_cross_pairs_and_self_loops() {
        let g = TemporalGraph::new(
            Tensor::zeros(3, 2),
            vec![0, 0, 1],
            vec![
                TemporalEdge { src: 0, dst: 1, t: 1.0 },
                TemporalEdge { src: 0, dst: 2, t: 2.0 },
            ],
        )
        .unwrap();
        let cfg = ModelConfig {
            layers: 1,
            ..ModelConfig::default()
        };
        let plan = Plan::build(&g, &cfg, &[(0, 5.0), (1, 0.5)], GateMode::TrueLabels);
        let lp = &plan.layers[0];
        assert_eq!(&*lp.offsets, &[0, 2, 3]);
        assert_eq!(lp.cross, vec![true, false, false]);
        assert_eq!(lp.pair_dt, vec![3.0, 4.0, 0.0]);
        assert_eq!(lp.self_dt, vec![3.0, 0.0]);
        assert_eq!(plan.cross_pairs(), 1);
        let off = Plan::build(&g, &cfg, &[(0, 5.0)], GateMode::Off);
        assert_eq!(off.cross_pairs(), 0);
    }
}
