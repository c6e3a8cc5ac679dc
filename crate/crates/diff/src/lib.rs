//! Small reverse-mode autodiff over dense 2-D tensors.
//!
//! Losses are written once against [`Tape<T>`] for any [`Scalar`]. Running
//! them over `f64` gives gradients; over [`Dual`] it gives exact
//! Hessian-vector products.

mod error;
mod oracle;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use oracle::{fd_gradient, fd_hessian};
pub use params::{ParamId, ParamStore};
pub use scalar::{Dual, Scalar};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

/// A scalar objective of the parameters in a [`ParamStore`].
pub trait LossFn {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound) -> Result<Var>;
}

/// Loss value and flat gradient at `store`.
pub fn value_and_grad<L: LossFn + ?Sized>(loss: &L, store: &ParamStore) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::<f64>::new();
    let bound = tape.bind(store)?;
    let out = loss.build(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    Ok((tape.scalar(out), grads.flat(&bound, store)))
}

/// Gradient and `H v` in one dual pass.
pub fn grad_and_hvp<L: LossFn + ?Sized>(loss: &L, store: &ParamStore, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::<Dual>::new();
    let bound = tape.bind_tangent(store, v)?;
    let out = loss.build(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let flat = grads.flat(&bound, store);
    Ok((
        flat.iter().map(|d| d.re).collect(),
        flat.iter().map(|d| d.eps).collect(),
    ))
}

/// Hessian-vector product `∇²L(θ) v`.
pub fn hvp<L: LossFn + ?Sized>(loss: &L, store: &ParamStore, v: &[f64]) -> Result<Vec<f64>> {
    grad_and_hvp(loss, store, v).map(|(_, hv)| hv)
}

/// Directional derivative of the loss along `v`, with its value.
pub fn value_and_directional<L: LossFn + ?Sized>(loss: &L, store: &ParamStore, v: &[f64]) -> Result<(f64, f64)> {
    let mut tape = Tape::<Dual>::new();
    let bound = tape.bind_tangent(store, v)?;
    let out = loss.build(&mut tape, &bound)?;
    let d = tape.scalar(out);
    Ok((d.re, d.eps))
}
