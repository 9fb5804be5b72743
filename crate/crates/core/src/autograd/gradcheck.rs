//! Central finite differences for verifying reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward function on perturbed
//! inputs, so it stays independent of every backward closure it checks.

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing analytic against numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub total: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.passed as f64 / self.total as f64
        }
    }
}

/// Relative error with an absolute floor so that coordinates with
/// vanishing gradient do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn compare(analytic: &[f64], numeric: &[f64], rel_tol: f64, floor: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        total: analytic.len(),
        passed: 0,
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, floor);
        if e <= rel_tol {
            report.passed += 1;
        }
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = i;
        }
    }
    report
}

/// Central difference derivative of `f` at `x` along each coordinate listed
/// in `coords` (all coordinates when `None`).
pub fn finite_difference<F>(x: &Tensor<f64>, eps: f64, coords: Option<&[usize]>, mut f: F) -> Vec<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Analytic gradients of a scalar function built on a fresh graph, one
/// tensor per input.
pub fn analytic_gradients<F>(inputs: &[Tensor<f64>], f: &F) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.param_owned(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let value = loss.value().item();
    let grads = g.backward(&loss)?;
    Ok((value, vars.iter().map(|v| grads.get_or_zeros(v)).collect()))
}

/// Forward-only evaluation of the same function.
pub fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    f(&mut g, &vars).expect("forward").value().item()
}

/// Asserts that every coordinate of every input passes the check. Used by
/// the op-level unit tests.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, tol: f64, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let (_, analytic) = analytic_gradients(inputs, &f).expect("analytic gradients");
    for (k, grad) in analytic.iter().enumerate() {
        let numeric = finite_difference(&inputs[k], eps, None, |probe| {
            let mut perturbed = inputs.to_vec();
            perturbed[k] = probe.clone();
            evaluate(&perturbed, &f)
        });
        let report = compare(grad.data(), &numeric, tol, 1.0);
        assert_eq!(
            report.passed,
            report.total,
            "input {k}: worst coordinate {} analytic {} numeric {} (rel err {:e})",
            report.worst_index,
            grad.data()[report.worst_index],
            numeric[report.worst_index],
            report.max_rel_error
        );
    }
}
