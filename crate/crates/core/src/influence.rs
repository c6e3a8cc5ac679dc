//! Influence-function scores via conjugate gradient on Hessian-vector
//! products.
//!
//! For a training objective `L` with Hessian `H`, a class loss `L(G_k)` and
//! a per-node loss `l(v)`, the representativeness of a node set `g` is
//! `R(g) = ∇L(G_k)ᵀ (H + λI)⁻¹ Σ_{v∈g} ∇l(v)`. One linear solve per class
//! gives `u = (H + λI)⁻¹ ∇L(G_k)`, after which `R(g) = Σ_{v∈g} uᵀ∇l(v)` and
//! every per-node term comes out of a single dual-number forward pass.

use otg_diff::{grad_and_hvp, value_and_grad, Bound, Dual, LossFn, ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mlp2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    /// Relative residual `‖r‖ / ‖b‖` at which to stop.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive definite `A` given as a
/// matrix-vector product. Fails on non-positive curvature or when the
/// iteration budget runs out.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], opts: CgOptions) -> Result<CgSolution>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for it in 1..=opts.max_iter {
        let ap = apply(&p)?;
        let curv = dot(&p, &ap);
        if !(curv > 0.0) {
            return Err(Error::Convergence(format!(
                "non-positive curvature {curv:e} at iteration {it}"
            )));
        }
        let alpha = rs / curv;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let rel = rs_new.sqrt() / b_norm;
        if rel <= opts.tol {
            return Ok(CgSolution {
                x,
                iterations: it,
                residual: rel,
            });
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Err(Error::Convergence(format!(
        "residual {:e} after {} iterations",
        rs.sqrt() / b_norm,
        opts.max_iter
    )))
}

/// `(H + λI)⁻¹ b` for the Hessian of `objective` at `store`. On failure
/// retries once with `10λ`. Returns the solution and the damping used.
pub fn inverse_hvp<L: LossFn + ?Sized>(
    objective: &L,
    store: &ParamStore,
    b: &[f64],
    lambda: f64,
    opts: CgOptions,
) -> Result<(CgSolution, f64)> {
    let solve = |lam: f64| {
        conjugate_gradient(
            |v| {
                let mut hv = otg_diff::hvp(objective, store, v)?;
                for (h, &vi) in hv.iter_mut().zip(v) {
                    *h += lam * vi;
                }
                Ok(hv)
            },
            b,
            opts,
        )
    };
    match solve(lambda) {
        Ok(s) => Ok((s, lambda)),
        Err(first) => {
            let retry = if lambda > 0.0 { lambda * 10.0 } else { 1e-3 };
            log::warn!("influence solve failed with damping {lambda}: {first}; retrying with {retry}");
            solve(retry).map(|s| (s, retry))
        }
    }
}

/// A model whose loss decomposes over indexed items.
pub trait PerItemLoss {
    /// Number of items.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loss of each item in `items` as an `[|items|, 1]` column.
    fn item_losses<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, items: &[usize]) -> Result<Var>;
}

/// `(1/|items|) Σ l(i) + (l2/2)‖θ‖²`.
pub struct MeanLoss<'a, P: PerItemLoss> {
    pub inner: &'a P,
    pub items: &'a [usize],
    pub l2: f64,
}

impl<P: PerItemLoss> LossFn for MeanLoss<'_, P> {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> otg_diff::Result<Var> {
        let col = self.inner.item_losses(tape, p, self.items).map_err(to_diff)?;
        let mut loss = tape.mean(col)?;
        if self.l2 > 0.0 {
            for &v in p.vars() {
                let sq = tape.mul(v, v)?;
                let s = tape.sum(sq)?;
                let s = tape.scale(s, 0.5 * self.l2)?;
                loss = tape.add(loss, s)?;
            }
        }
        Ok(loss)
    }
}

fn to_diff(e: Error) -> otg_diff::DiffError {
    match e {
        Error::Diff(d) => d,
        other => otg_diff::DiffError::Invalid {
            op: "loss",
            msg: other.to_string(),
        },
    }
}

/// `uᵀ ∇l(i)` for every item, from one dual forward pass along `u`.
pub fn item_directional<P: PerItemLoss>(model: &P, store: &ParamStore, u: &[f64], items: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::<Dual>::new();
    let p = tape.bind_tangent(store, u)?;
    let col = model.item_losses(&mut tape, &p, items)?;
    Ok(tape.value(col).data().iter().map(|d| d.eps).collect())
}

/// Per-item influence contributions for one class.
#[derive(Clone, Debug)]
pub struct ItemScores {
    /// `uᵀ∇l(i)` indexed like the model's items.
    pub r: Vec<f64>,
    pub lambda: f64,
    pub cg_iterations: usize,
}

/// Solves once for `u = (H + λI)⁻¹ ∇L(G_k)` and projects every item's
/// gradient onto it. `fit_items` defines the objective whose Hessian is
/// used, `class_items` defines `G_k`.
pub fn item_scores<P: PerItemLoss>(
    model: &P,
    store: &ParamStore,
    fit_items: &[usize],
    l2: f64,
    class_items: &[usize],
    lambda: f64,
    opts: CgOptions,
) -> Result<ItemScores> {
    if class_items.is_empty() || fit_items.is_empty() {
        return Err(Error::Invalid("influence needs non-empty fit and class sets".into()));
    }
    let objective = MeanLoss {
        inner: model,
        items: fit_items,
        l2,
    };
    let class_loss = MeanLoss {
        inner: model,
        items: class_items,
        l2: 0.0,
    };
    let (_, g_class) = value_and_grad(&class_loss, store)?;
    let (sol, lambda) = inverse_hvp(&objective, store, &g_class, lambda, opts)?;
    let all: Vec<usize> = (0..model.len()).collect();
    let r = item_directional(model, store, &sol.x, &all)?;
    Ok(ItemScores {
        r,
        lambda,
        cg_iterations: sol.iterations,
    })
}

/// Dense reference: `∇L(G_k)ᵀ (H + λI)⁻¹ ∇L(g)` with `H` assembled column
/// by column from Hessian-vector products and solved by Gaussian
/// elimination. Meant for small parameter counts.
pub fn explicit_score<P: PerItemLoss>(
    model: &P,
    store: &ParamStore,
    fit_items: &[usize],
    l2: f64,
    class_items: &[usize],
    triad_items: &[usize],
    lambda: f64,
) -> Result<f64> {
    let n = store.len();
    let objective = MeanLoss {
        inner: model,
        items: fit_items,
        l2,
    };
    let mut h = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let (_, col) = grad_and_hvp(&objective, store, &e)?;
        for i in 0..n {
            h[i * n + j] = col[i];
        }
    }
    for i in 0..n {
        h[i * n + i] += lambda;
    }
    let (_, g_class) = value_and_grad(
        &MeanLoss {
            inner: model,
            items: class_items,
            l2: 0.0,
        },
        store,
    )?;
    let x = gauss_solve(h, g_class.clone(), n)?;
    let g_triad = item_sum_gradient(model, store, triad_items)?;
    Ok(dot(&x, &g_triad))
}

/// `Σ_{i∈items} ∇l(i)`.
pub fn item_sum_gradient<P: PerItemLoss>(model: &P, store: &ParamStore, items: &[usize]) -> Result<Vec<f64>> {
    struct Sum<'a, P: PerItemLoss>(&'a P, &'a [usize]);
    impl<P: PerItemLoss> LossFn for Sum<'_, P> {
        fn build<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound) -> otg_diff::Result<Var> {
            let col = self.0.item_losses(tape, p, self.1).map_err(to_diff)?;
            tape.sum(col)
        }
    }
    Ok(value_and_grad(&Sum(model, items), store)?.1)
}

fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[piv * n + col].abs() < 1e-300 {
            return Err(Error::Convergence("singular system".into()));
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    Ok(x)
}

/// Which head weights enter `θ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfluenceScope {
    /// Both layers of the classification head.
    #[default]
    Head,
    /// Only the output layer; the hidden activations are held fixed.
    HeadOutput,
}

/// Classification head applied to fixed embeddings, one item per row.
pub struct HeadItems {
    /// Head input rows (`Head` scope) or hidden activations
    /// (`HeadOutput` scope).
    pub x: Tensor<f64>,
    /// Column index of each row's label within `selector`.
    pub targets: Vec<usize>,
    /// `C × |seen|` selection of the seen logits.
    pub selector: Tensor<f64>,
    pub scope: InfluenceScope,
}

impl HeadItems {
    /// Parameters of the head restricted to `scope`, as a fresh store whose
    /// tensors are ordered `w1, b1, w2, b2` (or `w2, b2`).
    pub fn params(full: &ParamStore, head: &Mlp2, scope: InfluenceScope) -> ParamStore {
        match scope {
            InfluenceScope::Head => full.subset(&[head.w1, head.b1, head.w2, head.b2]),
            InfluenceScope::HeadOutput => full.subset(&[head.w2, head.b2]),
        }
    }

    /// Hidden activations `relu(x W1 + b1)` for the output-only scope.
    pub fn hidden(full: &ParamStore, head: &Mlp2, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone())?;
        let w1 = tape.constant(full.get(head.w1).clone())?;
        let b1 = tape.constant(full.get(head.b1).clone())?;
        let h = tape.matmul(xv, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        Ok(tape.value(h).clone())
    }
}

impl PerItemLoss for HeadItems {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn item_losses<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, items: &[usize]) -> Result<Var> {
        let v = p.vars();
        let x = tape.constant_f64(&self.x)?;
        let x = tape.gather_rows(x, items.to_vec())?;
        let h = match self.scope {
            InfluenceScope::Head => {
                let h = tape.matmul(x, v[0])?;
                let h = tape.add(h, v[1])?;
                tape.relu(h)?
            }
            InfluenceScope::HeadOutput => x,
        };
        let (w2, b2) = match self.scope {
            InfluenceScope::Head => (v[2], v[3]),
            InfluenceScope::HeadOutput => (v[0], v[1]),
        };
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, b2)?;
        let sel = tape.constant_f64(&self.selector)?;
        let logits = tape.matmul(o, sel)?;
        per_row_ce(
            tape,
            logits,
            &items.iter().map(|&i| self.targets[i]).collect::<Vec<_>>(),
        )
    }
}

/// Cross-entropy of each row as an `[n, 1]` column.
pub fn per_row_ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let [n, c] = tape.shape(logits);
    let ls = tape.log_softmax(logits)?;
    let mut pick = Tensor::zeros(n, c);
    for (i, &y) in targets.iter().enumerate() {
        pick.set(i, y, -1.0);
    }
    let pick = tape.constant_f64(&pick)?;
    let m = tape.mul(ls, pick)?;
    Ok(tape.sum_cols(m)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_spd_system() {
        let a = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let b = [1.0, 2.0, 3.0];
        let sol = conjugate_gradient(
            |v| Ok((0..3).map(|i| (0..3).map(|j| a[i * 3 + j] * v[j]).sum()).collect()),
            &b,
            CgOptions::default(),
        )
        .unwrap();
        let check: Vec<f64> = (0..3).map(|i| (0..3).map(|j| a[i * 3 + j] * sol.x[j]).sum()).collect();
        for i in 0..3 {
            assert!((check[i] - b[i]).abs() < 1e-9);
        }
        assert!(sol.iterations <= 3);
    }

    #[test]
    fn cg_rejects_indefinite() {
        let r = conjugate_gradient(|v| Ok(vec![-v[0], v[1]]), &[1.0, 0.0], CgOptions::default());
        assert!(matches!(r, Err(Error::Convergence(_))));
    }

    #[test]
    fn one_dimensional_score() {
        // ∇L(G)=2, H=1, ∇L(g)=3, λ=0
        let sol = conjugate_gradient(|v| Ok(v.to_vec()), &[2.0], CgOptions::default()).unwrap();
        assert_eq!(sol.x[0] * 3.0, 6.0);
        let zero = conjugate_gradient(|v| Ok(v.to_vec()), &[0.0], CgOptions::default()).unwrap();
        assert_eq!(zero.x[0] * 3.0, 0.0);
    }
}
