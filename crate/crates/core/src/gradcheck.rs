//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` maps an input to `(scalar output, analytic gradient)`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)>,
{
    Ok(grad_check_coords(f, input, epsilon, None)?.max_relative_error)
}

/// Like [`grad_check`] but restricted to `coords` when given; large inputs
/// are checked on a sample of coordinates.
pub fn grad_check_coords<F>(
    mut f: F,
    input: &Tensor<f64>,
    epsilon: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let (out, grad) = f(input)?;
    if out.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "function under test must be scalar, got shape {:?}",
            out.shape()
        )));
    }
    if grad.shape() != input.shape() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient {:?} vs input {:?}", grad.shape(), input.shape()),
        ));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..input.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
    };
    let mut probe = input.clone();
    for &i in coords {
        if i >= input.len() {
            return Err(Error::InvalidArgument(format!(
                "coordinate {i} out of range"
            )));
        }
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + epsilon;
        let fp = f(&probe)?.0.data()[0];
        probe.data_mut()[i] = x0 - epsilon;
        let fm = f(&probe)?.0.data()[0];
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let analytic = grad.data()[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if err > report.max_relative_error || !err.is_finite() {
            report.max_relative_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
