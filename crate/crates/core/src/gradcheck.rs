//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite-difference step used by the checks.
pub const STEP: f64 = 1e-5;
/// Floor added to the analytic magnitude in the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::contract(format!("input {i} received no gradient")))?
            .clone();
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some(Mismatch {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
