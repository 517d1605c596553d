//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of every adjoint it is used to verify.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Mixed relative error `|a - n| / max(1, |a|, |n|)`: relative for large
/// gradients, absolute for small ones.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn numeric_grad(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(x)?;
        x[i] = orig - h;
        let minus = f(x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest [`rel_error`] over all checked coordinates.
    pub max_rel_err: f64,
    /// `(input, element)` of the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the graph gradient of the scalar built by `f` against central
/// differences, for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut data = work[i].data().to_vec();
        let numeric = numeric_grad(&mut data, h, |x| {
            work[i].data_mut().copy_from_slice(x);
            eval(&work)
        })?;
        work[i].data_mut().copy_from_slice(inputs[i].data());
        for (j, (a, n)) in analytic[i].data().iter().zip(&numeric).enumerate() {
            let err = rel_error(*a, *n);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
