//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a - n| / (|a| + |n| + 1e-12)` per element.
    pub relative_errors: Vec<f64>,
    /// Indices whose relative error exceeds the tolerance.
    pub failures: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares a supplied gradient against central differences of `value`.
pub fn compare_gradient<F>(
    value: F,
    analytic: &[f64],
    x: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let relative_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let failures = relative_errors
        .iter()
        .enumerate()
        .filter(|(_, &e)| !(e <= tol))
        .map(|(i, _)| i)
        .collect();
    Ok(GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        relative_errors,
        failures,
        tolerance: tol,
    })
}

/// Checks the tape gradient of a scalar function `f` at `x`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let out = f(&mut tape, input)?;
    tape.backward(out)?;
    let analytic = tape.grad(input).expect("leaf gradient").to_vec();
    let value = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.leaf(probe.clone(), false);
        let out = f(&mut tape, input)?;
        Ok(tape.value(out).item())
    };
    compare_gradient(value, &analytic, x, h, tol)
}
