//! Central-difference verification of tape gradients.

use super::dense::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`
    pub max_relative_error: f64,
    /// (parameter index, flat element index) of the worst entry
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Compares the backward pass of `f` against central differences with step `eps`.
///
/// `f` must be deterministic: every random input has to be fixed outside it.
pub fn finite_difference_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt_or_zeros(v)).collect()
    };
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&tape, &vars)?.value();
        if loss.len() != 1 {
            return Err(Error::usage("finite_difference_check needs a scalar function"));
        }
        Ok(loss.item())
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let mut data = p.to_vec();
            let orig = data[ei];
            data[ei] = orig + eps;
            work[pi] = Tensor::new(p.shape().to_vec(), data.clone())?;
            let up = eval(&work)?;
            data[ei] = orig - eps;
            work[pi] = Tensor::new(p.shape().to_vec(), data)?;
            let down = eval(&work)?;
            work[pi] = p.clone();
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.entries += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
