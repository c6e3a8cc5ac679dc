//! Information-bottleneck training of the class-agnostic encoder.
//!
//! `L_IB = CLUB(z, y) - β · MINE(x, z)`, both estimated in-batch: every
//! `(i, j)` pair of a batch stands in for a sample from the product of
//! marginals.

use otg_diff::{value_and_grad, Bound, LossFn, ParamId, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::graph::ClassId;
use crate::model::{CriticIds, Model};
use crate::optim::Adam;

pub const PROB_FLOOR: f64 = 1e-12;

/// A batch of node embeddings with their labels.
#[derive(Clone, Debug)]
pub struct IbBatch {
    pub x: Tensor<f64>,
    pub y: Vec<ClassId>,
}

impl IbBatch {
    pub fn new(x: Tensor<f64>, y: Vec<ClassId>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Invalid(format!("{} rows for {} labels", x.rows(), y.len())));
        }
        if y.len() < 2 {
            return Err(Error::Invalid("an IB batch needs at least two nodes".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `Σ_{i,c} A[i,c]·log q(c|z_i)` with `A[i,c] = 1[c=y_i]/n - count(c)/n²`,
/// which equals the in-batch CLUB estimate.
fn club_weights(y: &[ClassId], num_classes: usize) -> Tensor<f64> {
    let n = y.len() as f64;
    let mut counts = vec![0.0; num_classes];
    for &c in y {
        counts[c] += 1.0;
    }
    let mut a = Tensor::zeros(y.len(), num_classes);
    for (i, &yi) in y.iter().enumerate() {
        for (c, &cnt) in counts.iter().enumerate() {
            let mut v = -cnt / (n * n);
            if c == yi {
                v += 1.0 / n;
            }
            a.set(i, c, v);
        }
    }
    a
}

/// CLUB estimate from classifier logits `[n, C]`.
pub fn club_from_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var, y: &[ClassId]) -> Result<Var> {
    let c = tape.shape(logits)[1];
    let probs = tape.softmax(logits)?;
    let probs = tape.clamp_min(probs, PROB_FLOOR)?;
    let lp = tape.log(probs)?;
    let w = tape.constant_f64(&club_weights(y, c))?;
    let m = tape.mul(lp, w)?;
    Ok(tape.sum(m)?)
}

/// Critic values `T(x_i, z_j)` for all pairs, as an `[n, n]` matrix.
pub fn critic_matrix<T: Scalar>(tape: &mut Tape<T>, c: &CriticIds, p: &Bound, x: Var, z: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let a = tape.matmul(x, p[c.wx])?;
    let b = tape.matmul(z, p[c.wz])?;
    let b = tape.add(b, p[c.b1])?;
    let rows_i: Vec<usize> = (0..n * n).map(|k| k / n).collect();
    let rows_j: Vec<usize> = (0..n * n).map(|k| k % n).collect();
    let ai = tape.gather_rows(a, rows_i)?;
    let bj = tape.gather_rows(b, rows_j)?;
    let h = tape.add(ai, bj)?;
    let h = tape.relu(h)?;
    let t = tape.matmul(h, p[c.w2])?;
    let t = tape.add(t, p[c.b2])?;
    Ok(tape.reshape(t, n, n)?)
}

/// `(1/n)Σ_i [T_ii - log((1/n)Σ_j exp T_ij)]` from a critic matrix.
pub fn mine_from_matrix<T: Scalar>(tape: &mut Tape<T>, t: Var) -> Result<Var> {
    let n = tape.shape(t)[0];
    let flat = tape.reshape(t, n * n, 1)?;
    let diag = tape.gather_rows(flat, (0..n).map(|i| i * n + i).collect::<Vec<_>>())?;
    let joint = tape.mean(diag)?;
    let lse = tape.logsumexp_rows(t)?;
    let marg = tape.mean(lse)?;
    let d = tape.sub(joint, marg)?;
    let ln_n = tape.constant(Tensor::scalar(T::from_f64((n as f64).ln())))?;
    Ok(tape.add(d, ln_n)?)
}

fn check_batch(batch: &IbBatch) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Invalid("an IB batch needs at least two nodes".into()));
    }
    Ok(())
}

/// Which parameters an [`IbObjective`] treats as live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IbPart {
    /// `-MINE`, with `z` fixed.
    Critic,
    /// Negative mean log-likelihood of `q_μ`, with `z` fixed.
    Variational,
    /// `CLUB - β·MINE` with `z = enc(x)`.
    Full,
}

/// Loss driving one of the three IB updates.
pub struct IbObjective<'a> {
    pub model: &'a Model,
    pub batch: &'a IbBatch,
    /// Fixed `z` for the critic and variational parts.
    pub z: Option<&'a Tensor<f64>>,
    pub beta: f64,
    pub part: IbPart,
}

impl LossFn for IbObjective<'_> {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> otg_diff::Result<Var> {
        self.build_inner(tape, p).map_err(|e| match e {
            Error::Diff(d) => d,
            other => otg_diff::DiffError::Invalid {
                op: "ib",
                msg: other.to_string(),
            },
        })
    }
}

impl IbObjective<'_> {
    fn build_inner<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> Result<Var> {
        let m = self.model;
        let x = tape.constant_f64(&self.batch.x)?;
        let z = match (self.part, self.z) {
            (IbPart::Full, _) => m.encoder.forward(tape, p, x)?,
            (_, Some(z)) => tape.constant_f64(z)?,
            (_, None) => return Err(Error::Invalid("critic and variational parts need a fixed z".into())),
        };
        match self.part {
            IbPart::Critic => {
                let t = critic_matrix(tape, &m.critic, p, x, z)?;
                let mi = mine_from_matrix(tape, t)?;
                Ok(tape.scale(mi, -1.0)?)
            }
            IbPart::Variational => {
                let logits = m.q_mu.forward(tape, p, z)?;
                cross_entropy(tape, logits, &self.batch.y)
            }
            IbPart::Full => {
                let logits = m.q_mu.forward(tape, p, z)?;
                let club = club_from_logits(tape, logits, &self.batch.y)?;
                if self.beta == 0.0 {
                    return Ok(club);
                }
                let t = critic_matrix(tape, &m.critic, p, x, z)?;
                let mi = mine_from_matrix(tape, t)?;
                let bm = tape.scale(mi, self.beta)?;
                Ok(tape.sub(club, bm)?)
            }
        }
    }
}

/// Mean cross-entropy of `logits` against column indices `targets`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let [n, c] = tape.shape(logits);
    if n != targets.len() || n == 0 {
        return Err(Error::Invalid(format!("{n} logit rows for {} targets", targets.len())));
    }
    let ls = tape.log_softmax(logits)?;
    let mut pick = Tensor::zeros(n, c);
    for (i, &y) in targets.iter().enumerate() {
        pick.set(i, y, -1.0 / n as f64);
    }
    let pick = tape.constant_f64(&pick)?;
    let m = tape.mul(ls, pick)?;
    Ok(tape.sum(m)?)
}

/// `enc(x)` as plain values.
pub fn encode(model: &Model, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let p = tape.bind_frozen(&model.store)?;
    let xv = tape.constant(x.clone())?;
    let z = model.encoder.forward(&mut tape, &p, xv)?;
    Ok(tape.value(z).clone())
}

fn eval_with<F>(model: &Model, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let p = tape.bind_frozen(&model.store)?;
    let v = f(&mut tape, &p)?;
    Ok(tape.scalar(v))
}

/// CLUB estimate of `I(z; y)` with `q_μ`.
pub fn club_estimate(model: &Model, batch: &IbBatch, z: &Tensor<f64>) -> Result<f64> {
    check_batch(batch)?;
    eval_with(model, |tape, p| {
        let zv = tape.constant_f64(z)?;
        let logits = model.q_mu.forward(tape, p, zv)?;
        club_from_logits(tape, logits, &batch.y)
    })
}

/// MINE estimate of `I(x; z)` with the critic.
pub fn mine_estimate(model: &Model, x: &Tensor<f64>, z: &Tensor<f64>) -> Result<f64> {
    if x.rows() < 2 || x.rows() != z.rows() {
        return Err(Error::Invalid("MINE needs at least two paired rows".into()));
    }
    eval_with(model, |tape, p| {
        let xv = tape.constant_f64(x)?;
        let zv = tape.constant_f64(z)?;
        let t = critic_matrix(tape, &model.critic, p, xv, zv)?;
        mine_from_matrix(tape, t)
    })
}

/// `L_IB` at the current weights.
pub fn ib_loss(model: &Model, batch: &IbBatch, beta: f64) -> Result<f64> {
    check_batch(batch)?;
    let obj = IbObjective {
        model,
        batch,
        z: None,
        beta,
        part: IbPart::Full,
    };
    eval_with(model, |tape, p| obj.build_inner(tape, p))
}

/// Optimizer state for the three IB updates.
#[derive(Clone, Debug)]
pub struct IbOptimizers {
    pub critic: Adam,
    pub variational: Adam,
    pub encoder: Adam,
}

impl IbOptimizers {
    pub fn new(model: &Model, lr: f64) -> Self {
        Self {
            critic: Adam::new(&model.store, model.critic_ids(), lr),
            variational: Adam::new(&model.store, model.q_ids(), lr),
            encoder: Adam::new(&model.store, model.encoder_ids(), lr),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.critic.lr = lr;
        self.variational.lr = lr;
        self.encoder.lr = lr;
    }
}

/// Losses seen during one [`ib_step`], each before its own update.
#[derive(Clone, Copy, Debug, Default)]
pub struct IbStepReport {
    pub mine: f64,
    pub q_nll: f64,
    pub ib: f64,
}

/// One critic ascent step, one maximum-likelihood step on `q_μ`, then one
/// encoder descent step on `L_IB` with the other two frozen.
pub fn ib_step(model: &mut Model, batch: &IbBatch, beta: f64, opt: &mut IbOptimizers) -> Result<IbStepReport> {
    check_batch(batch)?;
    let z = encode(model, &batch.x)?;
    let mut report = IbStepReport::default();
    for part in [IbPart::Critic, IbPart::Variational, IbPart::Full] {
        let (value, grad) = {
            let obj = IbObjective {
                model,
                batch,
                z: Some(&z),
                beta,
                part,
            };
            value_and_grad(&obj, &model.store)?
        };
        let adam = match part {
            IbPart::Critic => {
                report.mine = -value;
                &mut opt.critic
            }
            IbPart::Variational => {
                report.q_nll = value;
                &mut opt.variational
            }
            IbPart::Full => {
                report.ib = value;
                &mut opt.encoder
            }
        };
        adam.step(&mut model.store, &grad);
    }
    Ok(report)
}

/// Parameters touched by [`ib_step`].
pub fn ib_param_ids(model: &Model) -> Vec<ParamId> {
    let mut v = model.critic_ids();
    v.extend(model.q_ids());
    v.extend(model.encoder_ids());
    v
}

/// Pairs a critic/encoder/variational head to a stand-alone model for
/// estimator tests on raw vectors.
pub fn standalone(dim: usize, num_classes: usize, hidden: usize, seed: u64) -> Result<Model> {
    let cfg = crate::model::ModelConfig {
        embed_dim: dim,
        time_dim: 1,
        attn_dim: 1,
        layers: 1,
        neighbors: 1,
        head_hidden: 1,
        ib_hidden: hidden,
        critic_hidden: hidden,
        ..Default::default()
    };
    Model::new(cfg, 1, num_classes, seed)
}
