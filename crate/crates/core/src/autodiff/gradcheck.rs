//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the backward rules it checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
/// Central differences resolve derivatives only to about `eps * |f| / h`.
/// Components within this many resolution units of zero are also compared
/// absolutely, so rounding in `f` is not reported as a gradient error.
pub const RESOLUTION_UNITS: f64 = 1e5;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.n_checked += other.n_checked;
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a central difference with step `h` whose two
/// evaluations have magnitude up to `f_scale`. Intermediate values of unit
/// size round just like the output, so the scale is taken as at least 1.
pub fn resolution_floor(f_scale: f64, h: f64) -> f64 {
    (RESOLUTION_UNITS * f64::EPSILON * f_scale.max(1.0) / h).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central differences of step `h`, over every input element.
///
/// `f` receives a fresh graph and one parameter leaf per input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|t| t.data().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |d| d[j]);
            let floor = resolution_floor(plus.abs().max(minus.abs()), h);
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, floor));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.n_checked += 1;
        }
    }
    Ok(report)
}
