use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter_index: usize,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against central differences.
///
/// `f` maps a flat parameter vector to `(value, gradient)`. Only the entries
/// listed in `indices` are perturbed; `None` checks every entry.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    indices: Option<&[usize]>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check step {step} must be > 0")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradient entries for {} parameters", analytic.len(), params.len()),
        ));
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter_index: indices.first().copied().unwrap_or(0),
        tolerance,
        checked: indices.len(),
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let (plus, _) = f(&x)?;
        x[i] = orig - step;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("grad_check at parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_parameter_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[3.0], None, 1e-5, 1e-9)
            .unwrap();
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let r = grad_check(|_| Ok((4.0, vec![0.0, 0.0])), &[1.0, -2.0], None, 1e-5, 1e-9).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let r = grad_check(
            |x| Ok((x[0] * x[1], vec![x[1], 2.0 * x[0]])),
            &[1.5, 2.0],
            None,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst_parameter_index, 1);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(grad_check(|x| Ok((1.0 / x[0], vec![0.0])), &[0.0], None, 1e-5, 1e-4).is_err());
        assert!(grad_check(|_| Ok((f64::NAN, vec![0.0])), &[1.0], None, 1e-5, 1e-4).is_err());
    }
}
