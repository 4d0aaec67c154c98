//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub shape: Vec<usize>,
    pub max_rel_error: f64,
    /// Flat position of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the gradients of `f` at `params` against central differences
/// with the given `step`.
///
/// `f` receives one tensor per entry of `params` and must be deterministic:
/// any randomness has to be reseeded inside it.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = params.iter().map(Tensor::as_param).collect();
    let out = f(&leaves)?;
    if !out.item().is_finite() {
        return Err(Error::NonFinite(format!("objective value {}", out.item())));
    }
    let grads = out.backward()?;

    let mut reports = Vec::with_capacity(params.len());
    for (index, leaf) in leaves.iter().enumerate() {
        let analytic = grads.values_or_zero(leaf);
        let mut check = ParamCheck {
            index,
            shape: leaf.shape().to_vec(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for entry in 0..leaf.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut inputs: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
                let mut data = leaf.to_vec();
                data[entry] += delta;
                inputs[index] = Tensor::new(data, leaf.shape().to_vec())?;
                let value = f(&inputs)?.item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "objective value {value} at perturbed parameter {index}[{entry}]"
                    )));
                }
                Ok(value)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let err = relative_error(analytic[entry], numeric);
            if err > check.max_rel_error || entry == 0 {
                check.max_rel_error = err;
                check.worst_entry = entry;
                check.analytic = analytic[entry];
                check.numeric = numeric;
            }
        }
        reports.push(check);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: reports,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}
