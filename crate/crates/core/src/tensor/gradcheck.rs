use serde::Serialize;

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Elements compared.
    pub checked: usize,
    /// Elements whose one-sided slopes disagree, i.e. a kink of a piecewise
    /// linear op lies within `epsilon` of the evaluation point.
    pub skipped: usize,
}

const REL_FLOOR: f64 = 1e-8;

/// Checks the tape gradients of `f` with respect to every element of every
/// input. `f` must return a scalar.
pub fn finite_diff_check<F>(
    op_name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt_tensor(v).into_data()).collect();

    let value = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    finite_diff_check_with(op_name, inputs, value, &analytic, epsilon, tolerance)
}

/// Checks caller-supplied analytic gradients against central differences of
/// `value`. `analytic[i]` must have one entry per element of `inputs[i]`.
pub fn finite_diff_check_with<V>(
    op_name: &str,
    inputs: &[Tensor<f64>],
    value: V,
    analytic: &[Vec<f64>],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    V: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    assert_eq!(inputs.len(), analytic.len(), "one analytic gradient per input");
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let f0 = value(&work)?;
    let mut report = GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tolerance,
        passed: false,
        checked: 0,
        skipped: 0,
    };
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), inputs[i].numel(), "analytic gradient length for input {i}");
        for (j, &a) in grad.iter().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + epsilon;
            let fp = value(&work)?;
            work[i].data_mut()[j] = orig - epsilon;
            let fm = value(&work)?;
            work[i].data_mut()[j] = orig;

            let forward = (fp - f0) / epsilon;
            let backward = (f0 - fm) / epsilon;
            if (forward - backward).abs() > tolerance * forward.abs().max(backward.abs()).max(REL_FLOOR) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * epsilon);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
