//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradient norm treated as exactly zero. Central differences at `h = 1e-5`
/// carry rounding noise near `1e-11`, so parameters with a vanishing true
/// gradient (a key bias under softmax shift invariance) are compared in
/// absolute terms.
pub const ZERO_GRADIENT: f64 = 1e-8;

/// Analytic vs. numeric comparison for one input tensor.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradReport {
    /// `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂)`, or the absolute difference when both
    /// norms are below [`ZERO_GRADIENT`].
    pub fn relative_error(&self) -> f64 {
        let diff = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < ZERO_GRADIENT {
            diff
        } else {
            diff / scale
        }
    }
}

/// Evaluates `f` on fresh tapes: once with backward for the analytic
/// gradient, then twice per element at `x ± h` for the numeric one.
/// `f` must be deterministic in its inputs.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (which, analytic) in analytic.into_iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = work[which].data()[e];
            work[which].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[which].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[which].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        reports.push(GradReport { analytic, numeric });
    }
    Ok(reports)
}

/// Largest relative error across all inputs of [`check`].
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(check(inputs, h, f)?
        .iter()
        .map(GradReport::relative_error)
        .fold(0.0, f64::max))
}
