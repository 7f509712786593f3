//! Central finite-difference checks for anything built on [`Tape`].
//!
//! The numerical side only ever evaluates forward passes, so it is
//! independent of the backward rules it checks.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst per-input [`rel_err`] between analytic and numeric gradients.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences with step `eps`, perturbing every element of every input.
///
/// `f` must build the graph from the given leaf vars and return a
/// one-element loss; it is called `1 + 2 * total_elements` times.
pub fn check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_sampled(f, inputs, eps, usize::MAX)
}

/// Like [`check`] but perturbs at most `max_per_input` evenly spaced
/// elements of each input; the error is measured on those elements only.
pub fn check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    max_per_input: usize,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let n = inputs[i].len();
        let step = n.div_ceil(max_per_input.max(1)).max(1);
        let picked: Vec<usize> = (0..n).step_by(step).collect();
        let mut numeric = vec![0.0; picked.len()];
        for (&e, slot) in picked.iter().zip(numeric.iter_mut()) {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let a: Vec<f64> = picked.iter().map(|&e| a.data()[e]).collect();
        per_input.push(rel_err(&a, &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_err,
        per_input,
    })
}

/// Gradient norms below this are compared in absolute terms: central
/// differences of an `O(1)` loss carry roundoff of roughly `1e-16 * |loss| / eps`.
pub const ABS_FLOOR: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||, ABS_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    diff / scale.max(ABS_FLOOR)
}
