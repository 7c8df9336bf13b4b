//! Finite-difference gradient checking.
//!
//! The checker treats a closure `f(tape, leaves) -> scalar loss` as a black
//! box: analytic gradients come from one backward pass, numeric gradients
//! from central differences (f(x+ε) − f(x−ε)) / 2ε with a fresh tape per
//! evaluation. `f` must be deterministic — draw any masks or noise outside
//! the closure and capture them as constants.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Relative error scaled to dodge the near-zero blowup:
/// |a − b| / max(|a|, |b|, 1).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Analytic gradients of `f` at `inputs`, one tensor per input (zeros where
/// the input does not influence the loss).
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    Ok(leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central-difference gradients of `f` at `inputs` with step `eps`.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, eps: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let v = loss.value().scalar_value();
        Ok(v)
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Largest elementwise [`rel_error`] between analytic and central-difference
/// gradients of `f` at `inputs`.
pub fn max_rel_error<F>(inputs: &[Tensor], f: &F, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(inputs, f)?;
    let numeric = numeric_gradients(inputs, f, eps)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_error(x, y));
        }
    }
    Ok(worst)
}

/// Identity funnel pinning a closure to the higher-ranked loss-builder
/// signature; without it inference assigns concrete lifetimes and the
/// closure stops unifying with the checker's bounds.
pub fn loss_builder<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}
