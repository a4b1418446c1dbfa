//! Central finite-difference gradient checking.
//!
//! The numeric gradient only ever calls the forward function, so it stays
//! independent of the backward closures it is checking.

use super::{Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_abs_diff: f64,
    pub max_analytic: f64,
    pub checked: usize,
}

/// Compares `backward` against central differences with step `h` for every
/// element of every input (or an evenly spaced subset of at most
/// `max_per_input` elements when set).
pub fn check<F>(inputs: &[Tensor], h: f32, max_per_input: Option<usize>, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(f64::from(tape.value(out).item()))
    };

    let mut report = GradCheck {
        max_abs_diff: 0.0,
        max_analytic: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = max_per_input.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for idx in (0..n).step_by(stride) {
            let orig = input.data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * f64::from(h));
            let a = f64::from(analytic[which][idx]);
            report.max_abs_diff = report.max_abs_diff.max((numeric - a).abs());
            report.max_analytic = report.max_analytic.max(a.abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// `Σ w ⊙ y` with fixed weights, accumulated in `f64`: turns any output into
/// a scalar loss whose gradient exercises every output element.
pub fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let yv = tape.value(y);
    if yv.numel() != weights.numel() {
        return Err(crate::Error::Shape(format!(
            "weighted_sum: {} weights for output {:?}",
            weights.numel(),
            yv.shape()
        )));
    }
    let s: f64 = yv
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    let w = weights.data().to_vec();
    Ok(tape.push_op(
        Tensor::scalar(s as f32),
        &[y],
        Box::new(move |args| vec![Some(w.iter().map(|&wi| wi * args.grad_out[0]).collect())]),
    ))
}
