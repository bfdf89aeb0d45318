//! Central finite differences as an independent oracle for `backward`.

use std::fmt;

use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tensor::{no_grad, Tensor};

/// Denominator floor for [`relative_error`]; keeps near-zero gradients from
/// turning rounding noise into large ratios.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub tolerance: f64,
}

impl GradReport {
    pub fn new(op_name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        GradReport {
            op_name: op_name.into(),
            max_rel_error,
            // NaN never passes.
            passed: max_rel_error <= tolerance,
            tolerance,
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {:>12.3e} {:>10.1e} {}",
            self.op_name,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `g[i] = (f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element of `x`.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: T) -> Tensor<T>
where
    T: Element,
    F: Fn(&Tensor<T>) -> T,
{
    let mut data = x.to_vec();
    let mut g = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + eps;
        let plus = f(&Tensor::from_vec(x.shape(), data.clone()).expect("same shape"));
        data[i] = orig - eps;
        let minus = f(&Tensor::from_vec(x.shape(), data.clone()).expect("same shape"));
        data[i] = orig;
        g.push((plus - minus) / (eps + eps));
    }
    Tensor::from_vec(x.shape(), g).expect("same shape")
}

/// Compares `backward` against central differences for every element of
/// every input. `f` must map the inputs to a one-element tensor.
pub fn check_gradients<T, F>(
    name: &str,
    inputs: &[Tensor<T>],
    f: F,
    eps: T,
    tolerance: f64,
) -> Result<GradReport>
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let params: Vec<Tensor<T>> = inputs.iter().map(|t| t.detach().into_param()).collect();
    let loss = f(&params)?;
    if loss.numel() != 1 {
        return Err(invalid(
            "check_gradients",
            format!("{name}: loss is not scalar"),
        ));
    }
    loss.backward()?;

    let mut worst = 0.0f64;
    for (k, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
        let eval = |xk: &Tensor<T>| -> T {
            let mut args: Vec<Tensor<T>> = params.iter().map(Tensor::detach).collect();
            args[k] = xk.clone();
            no_grad(|| f(&args).and_then(|l| l.item())).unwrap_or(T::nan())
        };
        let numeric = finite_diff_grad(eval, &p.detach(), eps);
        for (&a, &n) in analytic.iter().zip(numeric.data()) {
            let e = relative_error(a.as_f64(), n.as_f64());
            if e.is_nan() || e > worst {
                worst = e;
            }
        }
    }
    Ok(GradReport::new(name, worst, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_all_ones() {
        let x = Tensor::<f64>::from_vec([2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap();
        let g = finite_diff_grad(|t| t.sum().item().unwrap(), &x, 1e-4);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_vec([1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.mul(t).unwrap().sum().item().unwrap(), &x, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn report_passes_iff_within_tolerance() {
        assert!(GradReport::new("a", 1e-5, 1e-4).passed);
        assert!(!GradReport::new("a", 2e-4, 1e-4).passed);
        assert!(!GradReport::new("a", f64::NAN, 1e-4).passed);
    }
}
