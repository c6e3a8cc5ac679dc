//! Central-difference reference derivatives for tests.

use crate::{value_and_grad, LossFn, ParamStore, Result, Tape};

fn loss_at<L: LossFn + ?Sized>(loss: &L, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let bound = tape.bind(store)?;
    let out = loss.build(&mut tape, &bound)?;
    Ok(tape.scalar(out))
}

/// Central-difference gradient with step `h`.
pub fn fd_gradient<L: LossFn + ?Sized>(loss: &L, store: &ParamStore, h: f64) -> Result<Vec<f64>> {
    let theta = store.flatten();
    let mut work = store.clone();
    let mut out = Vec::with_capacity(theta.len());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        work.unflatten(&probe)?;
        let up = loss_at(loss, &work)?;
        probe[i] = theta[i] - h;
        work.unflatten(&probe)?;
        let down = loss_at(loss, &work)?;
        probe[i] = theta[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Dense Hessian by central differences of the reverse-mode gradient,
/// symmetrised. Row-major `P × P`.
pub fn fd_hessian<L: LossFn + ?Sized>(loss: &L, store: &ParamStore, h: f64) -> Result<Vec<f64>> {
    let theta = store.flatten();
    let p = theta.len();
    let mut work = store.clone();
    let mut probe = theta.clone();
    let mut hess = vec![0.0; p * p];
    for j in 0..p {
        probe[j] = theta[j] + h;
        work.unflatten(&probe)?;
        let (_, gu) = value_and_grad(loss, &work)?;
        probe[j] = theta[j] - h;
        work.unflatten(&probe)?;
        let (_, gd) = value_and_grad(loss, &work)?;
        probe[j] = theta[j];
        for i in 0..p {
            hess[i * p + j] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    for i in 0..p {
        for j in 0..i {
            let m = 0.5 * (hess[i * p + j] + hess[j * p + i]);
            hess[i * p + j] = m;
            hess[j * p + i] = m;
        }
    }
    Ok(hess)
}
