//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this in both routes are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn compare(analytic: Vec<f64>, numeric: Vec<f64>, tolerance: f64) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let relative_errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .collect();
        let (worst_index, max_relative_error) =
            relative_errors
                .iter()
                .copied()
                .enumerate()
                .fold(
                    (0, 0.0),
                    |best, (i, e)| if e > best.1 { (i, e) } else { best },
                );
        Self {
            passed: max_relative_error < tolerance,
            analytic,
            numeric,
            relative_errors,
            max_relative_error,
            worst_index,
            tolerance,
        }
    }
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn numeric_gradient<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe)?;
        probe[i] = orig - step;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "function not finite around coordinate {i}"
            )));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Checks the tape gradient of `f` at `point` against central differences.
///
/// `f` receives a fresh tape and the input variable and must return a scalar
/// node.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let input = point.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let x = tape.leaf(&input);
    let out = f(&mut tape, x)?;
    let value = tape.value(out).to_vec();
    if value.len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    if !value[0].is_finite() {
        return Err(Error::NonFinite("function value at check point".into()));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let shape = point.shape().to_vec();
    let numeric = numeric_gradient(
        |values| {
            let probe = Tensor::new(shape.clone(), values.to_vec())?;
            let mut tape = Tape::new();
            let x = tape.leaf(&probe);
            let out = f(&mut tape, x)?;
            Ok(tape.value(out)[0])
        },
        point.values(),
        step,
    )?;
    Ok(GradCheckReport::compare(analytic, numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let point = Tensor::vector(vec![0.2, -0.4, 0.9, 1.5]);
        let report = grad_check(
            |tape, x| {
                let s = tape.sum(x);
                Ok(tape.scale(s, 3.0))
            },
            &point,
            1e-5,
            1e-10,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-10, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn doubled_gradient_is_reported_as_failure() {
        let point = Tensor::vector(vec![0.2, -0.4, 0.9]);
        let report = grad_check(
            |tape, x| {
                let t = tape.tanh(x);
                Ok(tape.sum(t))
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        let doubled = report.analytic.iter().map(|g| 2.0 * g).collect();
        let bad = GradCheckReport::compare(doubled, report.numeric.clone(), 1e-4);
        assert!(!bad.passed);
        assert!(bad.max_relative_error > 0.4);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let err = numeric_gradient(
            |x| Ok(if x[0] > 0.0 { f64::INFINITY } else { 0.0 }),
            &[0.0],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
