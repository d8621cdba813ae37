use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for relative error, so gradients that are zero up to
/// rounding compare by absolute difference instead of blowing up.
const REL_FLOOR: f64 = 1e-6;

/// Analytic vs. central-difference comparison for a scalar function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Index (into `x`) where `max_rel_error` occurred.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks the gradient of `f` at `x` against central differences on every element.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, &all, step, tol)
}

/// Like [`finite_diff_check`] but probes only the given flat indices.
pub fn finite_diff_check_at<F>(
    f: F,
    x: &Tensor,
    indices: &[usize],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::Invalid(format!("probe index {bad} out of range")));
    }
    let shape = x.shape().to_vec();
    let probe = Tensor::parameter(shape.clone(), x.to_vec())?;
    let loss = f(&probe)?;
    loss.item()?;
    let analytic_full = match loss.backward() {
        Ok(_) => probe.grad().unwrap_or_else(|| vec![0.0; x.numel()]),
        // f ignores its argument entirely
        Err(Error::NoGraph) => vec![0.0; x.numel()],
        Err(e) => return Err(e),
    };

    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut v = x.to_vec();
        v[i] += delta;
        let y = f(&Tensor::new(shape.clone(), v)?)?.item()?;
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(y)
    };

    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = indices.first().copied().unwrap_or(0);
    for &i in indices {
        let n = (eval(i, step)? - eval(i, -step)?) / (2.0 * step);
        let a = analytic_full[i];
        let err = relative_error(a, n);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        analytic.push(a);
        numeric.push(n);
    }
    Ok(GradCheckReport {
        indices: indices.to_vec(),
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.0, 2.5, 7.0]).unwrap();
        let r = finite_diff_check(|p| p.sum(), &x, 1e-4, 1e-9).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = finite_diff_check(|p| p.sigmoid()?.sum(), &x, 1e-4, 1e-8).unwrap();
        assert_eq!(r.analytic, vec![0.25]);
        assert!((r.numeric[0] - 0.25).abs() < 1e-9);
        assert!(r.passed);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let x = Tensor::new(vec![1], vec![1e-5]).unwrap();
        // 1/x blows up at x - step = 0
        let r = finite_diff_check(|p| p.ones_like().div(p)?.sum(), &x, 1e-5, 1e-3);
        assert!(r.is_err());
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(finite_diff_check(|p| p.sum(), &x, 0.0, 1e-3).is_err());
    }
}
