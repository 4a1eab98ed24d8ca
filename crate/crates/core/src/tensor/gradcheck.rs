//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates the forward function, so it stays
//! independent of every backward rule it is used to check.

use super::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares backward-pass gradients of a scalar function of `inputs` with
/// central differences using [`DEFAULT_STEP`].
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    check_gradients_with_step(inputs, DEFAULT_STEP, f)
}

pub fn check_gradients_with_step<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        f(&tape, &vars)?.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let evaluate = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for e in 0..grad.len() {
            let original = probe[which].data()[e];
            probe[which].data_mut()[e] = original + step;
            let plus = evaluate(&probe)?;
            probe[which].data_mut()[e] = original - step;
            let minus = evaluate(&probe)?;
            probe[which].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.worst = Some((which, e));
            }
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}
