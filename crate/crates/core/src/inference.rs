//! Two-sided t-tests and confidence intervals for the take-up-effect null
//! `H0: delta = delta_0`, using the standard normal reference distribution
//! implied by the asymptotic theory.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::normal::{normal_quantile, two_sided_p};
use crate::scalar::{count, real, Scalar};

/// A single test of `H0: delta = delta_null` at level `alpha`.
///
/// `reject`, `p_value < alpha` and `delta_null` lying outside `ci` agree
/// with each other (ties at the exact boundary break toward acceptance).
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct TestResult {
    pub delta_null: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Set when the variance is exactly zero while the estimate differs
    /// from the null; `p_value` is 0 in that case.
    pub degenerate_variance: bool,
}

/// Tests `H0: delta = delta_null` given an estimate and a variance for
/// `sqrt(n) * (delta_hat - delta)`; the standard error is
/// `sqrt(variance / n_pairs)`.
pub fn t_test<F: Scalar>(
    delta_hat: F,
    variance_sqrt_n: F,
    n_pairs: usize,
    delta_null: F,
    alpha: F,
) -> Result<TestResult> {
    let alpha_f = alpha.to_f64().unwrap_or(f64::NAN);
    if !(alpha_f > 0.0 && alpha_f < 1.0) {
        return Err(Error::Config(format!(
            "alpha must lie strictly inside (0, 1), got {alpha_f}"
        )));
    }
    if variance_sqrt_n < F::zero() {
        return Err(Error::Config(format!(
            "variance must be nonnegative, got {}",
            variance_sqrt_n.to_f64().unwrap_or(f64::NAN)
        )));
    }
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }

    let se = (variance_sqrt_n / count::<F>(n_pairs)).sqrt();
    let diff = delta_hat - delta_null;
    let z: F = normal_quantile(F::one() - alpha * real::<F>(0.5));

    if se == F::zero() {
        let degenerate = diff != F::zero();
        let dh = delta_hat.to_f64().unwrap_or(f64::NAN);
        return Ok(TestResult {
            delta_null: delta_null.to_f64().unwrap_or(f64::NAN),
            t_stat: if degenerate {
                f64::INFINITY * diff.to_f64().unwrap_or(f64::NAN).signum()
            } else {
                0.0
            },
            p_value: if degenerate { 0.0 } else { 1.0 },
            reject: degenerate,
            alpha: alpha_f,
            ci_lower: dh,
            ci_upper: dh,
            degenerate_variance: degenerate,
        });
    }

    let t = diff / se;
    let p: F = two_sided_p(t);
    let p_f = p.to_f64().unwrap_or(f64::NAN);
    Ok(TestResult {
        delta_null: delta_null.to_f64().unwrap_or(f64::NAN),
        t_stat: t.to_f64().unwrap_or(f64::NAN),
        p_value: p_f,
        reject: p_f < alpha_f,
        alpha: alpha_f,
        ci_lower: (delta_hat - z * se).to_f64().unwrap_or(f64::NAN),
        ci_upper: (delta_hat + z * se).to_f64().unwrap_or(f64::NAN),
        degenerate_variance: false,
    })
}
