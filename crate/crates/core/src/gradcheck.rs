//! Central finite-difference gradient checking.

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Below this analytic magnitude the check switches to absolute error.
pub const ABS_FALLBACK_BELOW: f64 = 1e-6;
pub const ABS_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over elements with analytic magnitude at or above the fallback threshold.
    pub max_rel_err: f64,
    /// Largest absolute error over the fallback elements.
    pub max_abs_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
    /// Set when the function could not be evaluated to a finite value.
    pub oracle_failure: Option<String>,
}

/// Checks the gradient of a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), tol)
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        tol,
        passed: false,
        oracle_failure: None,
    };

    let eval = |values: &[Tensor]| -> std::result::Result<f64, String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
        let v = tape.value(out).item().ok_or("function is not scalar-valued")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite evaluation {v}"))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let analytic: Vec<Vec<f64>> = match f(&mut tape, &vars).and_then(|out| {
        tape.backward(out)?;
        Ok(out)
    }) {
        Ok(out) if tape.value(out).item().is_some_and(f64::is_finite) => vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect(),
        Ok(_) => {
            report.oracle_failure = Some("non-finite or non-scalar output".into());
            return report;
        }
        Err(e) => {
            report.oracle_failure = Some(e.to_string());
            return report;
        }
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut ok = true;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.oracle_failure = Some(format!("input {i} element {j}: {e}"));
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let abs = (a - numeric).abs();
            if a.abs() < ABS_FALLBACK_BELOW {
                report.max_abs_err = report.max_abs_err.max(abs);
                ok &= abs <= ABS_TOL;
            } else {
                let rel = abs / a.abs().max(numeric.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
                ok &= rel <= tol;
            }
            report.checked += 1;
        }
    }
    report.passed = ok;
    report
}
