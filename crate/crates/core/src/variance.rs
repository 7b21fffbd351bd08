//! Variance estimators for sqrt(n) * (delta_hat - delta): the consistent
//! pairs-of-pairs estimator, the conventional robust estimator from the
//! intercept/take-up IV regression, the pair-fixed-effects HC0/HC1
//! variants, and the adjusted-estimator analogue.
//!
//! Scaling convention: every value reported here estimates the variance of
//! `sqrt(n) * (delta_hat - delta)` where `n` is the number of pairs, so a
//! standard error for `delta_hat` is `sqrt(value / n)`.

use nalgebra::{DMatrix, DVector};

use crate::data::{ObservedSample, PairStructure};
use crate::error::{Error, Result};
use crate::estimators::{
    transformed_outcomes, wald_estimate, CellMeans, WorkingModels, FIRST_STAGE_TOL,
};
use crate::regression;
use crate::scalar::{count, real, Scalar};

/// Pieces of the consistent variance estimator.
#[derive(Debug, Clone, Copy)]
pub struct NuComponents<F: Scalar = f64> {
    /// Mean over pairs of squared within-pair transformed-outcome gaps.
    pub tau_sq: F,
    /// Signed cross-pair product statistic over pairs-of-pairs blocks.
    pub lambda: F,
    /// Treated-minus-control mean of the transformed outcome.
    pub gamma: F,
    /// Squared first stage.
    pub denom: F,
    /// True when a tiny-negative value was clamped to zero.
    pub clamped: bool,
}

/// Degrees-of-freedom handling for the pair-fixed-effects sandwich.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcCorrection {
    Hc0,
    Hc1,
}

fn first_stage_checked<F: Scalar>(phi: [F; 2]) -> Result<F> {
    let gap = phi[1] - phi[0];
    if gap.abs() <= real(FIRST_STAGE_TOL) {
        return Err(Error::WeakFirstStage {
            phi1: phi[1].to_f64().unwrap_or(f64::NAN),
            phi0: phi[0].to_f64().unwrap_or(f64::NAN),
            gap: gap.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(gap)
}

fn gap_checked<F: Scalar>(gap: F) -> Result<F> {
    if gap.abs() <= real(FIRST_STAGE_TOL) {
        return Err(Error::WeakFirstStage {
            phi1: f64::NAN,
            phi0: f64::NAN,
            gap: gap.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(gap)
}

/// Shared core: tau^2, lambda and gamma on an already-transformed outcome.
fn nu_core<F: Scalar>(
    y_adj: &DVector<F>,
    a: &[u8],
    structure: &PairStructure,
) -> (F, F, F) {
    let n = structure.n_pairs();
    let n_f: F = count(n);

    let mut tau_sq = F::zero();
    for [u, v] in structure.pairs() {
        let gap = y_adj[*u] - y_adj[*v];
        tau_sq += gap * gap;
    }
    tau_sq /= n_f;

    let ordered: Vec<[usize; 2]> = structure.ordered_pairs().collect();
    let mut lambda = F::zero();
    for b in 0..n / 2 {
        let [p1, p2] = ordered[2 * b];
        let [q1, q2] = ordered[2 * b + 1];
        let sign = (count::<F>(a[p1] as usize) - count::<F>(a[p2] as usize))
            * (count::<F>(a[q1] as usize) - count::<F>(a[q2] as usize));
        lambda += (y_adj[p1] - y_adj[p2]) * (y_adj[q1] - y_adj[q2]) * sign;
    }
    lambda *= real::<F>(2.0) / n_f;

    let mut gamma = F::zero();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 1 {
            gamma += y_adj[i];
        } else {
            gamma -= y_adj[i];
        }
    }
    gamma /= n_f;

    (tau_sq, lambda, gamma)
}

fn assemble_nu<F: Scalar>(tau_sq: F, lambda: F, gamma: F, gap: F) -> (F, NuComponents<F>) {
    let half = real::<F>(0.5);
    let denom = gap * gap;
    let raw = (tau_sq - half * (lambda + gamma * gamma)) / denom;
    let clamped = raw < F::zero();
    let value = if clamped { F::zero() } else { raw };
    (
        value,
        NuComponents {
            tau_sq,
            lambda,
            gamma,
            denom,
            clamped,
        },
    )
}

/// Consistent variance estimator built from within-pair gaps, the signed
/// cross-pair product over pairs-of-pairs blocks, and the first stage.
/// Tiny-negative results are clamped to zero and flagged.
pub fn nu_hat_sq<F: Scalar>(
    sample: &ObservedSample<F>,
    structure: &PairStructure,
    delta_hat: F,
) -> Result<(F, NuComponents<F>)> {
    if structure.n_units() != sample.n_units() {
        return Err(Error::InvalidPairing(format!(
            "structure covers {} units, sample has {}",
            structure.n_units(),
            sample.n_units()
        )));
    }
    let cells = CellMeans::compute(sample)?;
    let gap = first_stage_checked(cells.phi)?;
    let y_hat = transformed_outcomes(sample, delta_hat);
    let (tau_sq, lambda, gamma) = nu_core(&y_hat, sample.a(), structure);
    Ok(assemble_nu(tau_sq, lambda, gamma, gap))
}

/// Conventional heteroskedasticity-robust variance from the two-stage
/// least squares regression of `y` on `(1, d)` instrumented by `(1, a)`,
/// scaled to the sqrt(n) convention (`n` times the slope's sandwich
/// variance). Equals the closed form
/// `(n^-1 sum u_i^2) / ((2/n) sum a_i d_i - n^-1 sum d_i)^2`.
pub fn omega_hat_sq<F: Scalar>(sample: &ObservedSample<F>) -> Result<F> {
    let n = sample.n_units();
    let ones = DMatrix::from_element(n, 1, F::one());
    let d = DMatrix::from_fn(n, 1, |i, _| count::<F>(sample.d()[i] as usize));
    let a = DMatrix::from_fn(n, 1, |i, _| count::<F>(sample.a()[i] as usize));
    let fit = regression::tsls(sample.y(), &d, &ones, &a)?;
    Ok(count::<F>(sample.n_pairs()) * fit.robust_vcov[(0, 0)])
}

/// Pair-fixed-effects robust variance, via the closed forms
/// `HC0 = tau^2 / (2 gap^2)` and `HC1 = (2n / (n - 1)) * HC0` implied by
/// within-pair demeaning. Requires exactly one treated unit per pair.
pub fn omega_pfe<F: Scalar>(
    sample: &ObservedSample<F>,
    structure: &PairStructure,
    correction: HcCorrection,
) -> Result<F> {
    let est = wald_estimate(sample)?;
    let (hc0, hc1) = omega_pfe_both(sample, structure, est.delta_hat, est.cells.first_stage())?;
    Ok(match correction {
        HcCorrection::Hc0 => hc0,
        HcCorrection::Hc1 => hc1,
    })
}

/// Both corrections at once for a known Wald estimate; shared by the
/// Monte Carlo engine.
pub(crate) fn omega_pfe_both<F: Scalar>(
    sample: &ObservedSample<F>,
    structure: &PairStructure,
    delta_hat: F,
    first_stage: F,
) -> Result<(F, F)> {
    if structure.n_units() != sample.n_units() {
        return Err(Error::InvalidPairing(format!(
            "structure covers {} units, sample has {}",
            structure.n_units(),
            sample.n_units()
        )));
    }
    structure.check_one_treated_per_pair(sample.a())?;
    let gap = gap_checked(first_stage)?;
    let y_hat = transformed_outcomes(sample, delta_hat);
    let n = structure.n_pairs();
    let mut tau_sq = F::zero();
    for [u, v] in structure.pairs() {
        let diff = y_hat[*u] - y_hat[*v];
        tau_sq += diff * diff;
    }
    tau_sq /= count::<F>(n);
    let hc0 = tau_sq / (real::<F>(2.0) * gap * gap);
    let hc1_factor = count::<F>(2 * n) / count::<F>(n - 1);
    Ok((hc0, hc0 * hc1_factor))
}

/// Consistent variance for the covariate-adjusted estimator: the same
/// pairs-of-pairs formula applied to
/// `y_adj_i = (y_i - delta d_i) - (m_{1,YD}(i) + m_{0,YD}(i)) / 2` with the
/// adjusted first stage in the denominator.
pub fn nu_hat_sq_adj<F: Scalar>(
    sample: &ObservedSample<F>,
    structure: &PairStructure,
    delta_hat_adj: F,
    models: &WorkingModels<F>,
    phi_adj: [F; 2],
) -> Result<(F, NuComponents<F>)> {
    if structure.n_units() != sample.n_units() {
        return Err(Error::InvalidPairing(format!(
            "structure covers {} units, sample has {}",
            structure.n_units(),
            sample.n_units()
        )));
    }
    if models.n_units() != sample.n_units() {
        return Err(Error::Config(format!(
            "working models cover {} units, sample has {}",
            models.n_units(),
            sample.n_units()
        )));
    }
    let gap = first_stage_checked(phi_adj)?;
    let y_hat = transformed_outcomes(sample, delta_hat_adj);
    let combined = models.combined(delta_hat_adj);
    let half = real::<F>(0.5);
    let y_adj = DVector::from_fn(sample.n_units(), |i, _| {
        y_hat[i] - half * (combined[(i, 0)] + combined[(i, 1)])
    });
    let (tau_sq, lambda, gamma) = nu_core(&y_adj, sample.a(), structure);
    Ok(assemble_nu(tau_sq, lambda, gamma, gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::adjusted_estimate;
    use crate::pairing::match_pairs_scalar;
    use crate::rng::{standard_normal, stream_rng, uniform};
    use crate::sim::{generate, DgpSpec};
    use crate::testkit::{micro_sample, random_sample};

    #[test]
    fn micro_example_components_vanish() {
        let (sample, structure) = micro_sample();
        // delta_hat = 2 makes the transformed outcome (1, 1, 2, 2):
        // constant within pairs.
        let (value, parts) = nu_hat_sq(&sample, &structure, 2.0).unwrap();
        assert_eq!(parts.tau_sq, 0.0);
        assert_eq!(parts.lambda, 0.0);
        assert_eq!(parts.gamma, 0.0);
        assert_eq!(parts.denom, 0.25);
        assert_eq!(value, 0.0);
        assert!(!parts.clamped);
    }

    #[test]
    fn gamma_vanishes_at_the_wald_estimate() {
        let (sample, structure) = random_sample(21, 40, 0);
        let est = wald_estimate(&sample).unwrap();
        let (_, parts) = nu_hat_sq(&sample, &structure, est.delta_hat).unwrap();
        assert!(parts.gamma.abs() < 1e-12, "gamma {}", parts.gamma);
    }

    #[test]
    fn nu_is_invariant_to_unit_and_pair_swaps() {
        let (sample, structure) = random_sample(22, 17, 0);
        let est = wald_estimate(&sample).unwrap();
        let (base, _) = nu_hat_sq(&sample, &structure, est.delta_hat).unwrap();
        let swapped_unit = structure.clone().swap_within_pair(5);
        let (v1, _) = nu_hat_sq(&sample, &swapped_unit, est.delta_hat).unwrap();
        assert!((v1 - base).abs() <= 1e-12 * base.max(1.0));
        let swapped_block = structure.clone().swap_block_pairs(3);
        let (v2, _) = nu_hat_sq(&sample, &swapped_block, est.delta_hat).unwrap();
        assert!((v2 - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn translation_of_y_leaves_all_variances_unchanged() {
        let (sample, structure) = random_sample(23, 19, 0);
        let est = wald_estimate(&sample).unwrap();
        let nu = nu_hat_sq(&sample, &structure, est.delta_hat).unwrap().0;
        let om = omega_hat_sq(&sample).unwrap();
        let pfe = omega_pfe(&sample, &structure, HcCorrection::Hc1).unwrap();

        let shifted = sample
            .clone()
            .with_y(sample.y().add_scalar(-13.25))
            .unwrap();
        let est2 = wald_estimate(&shifted).unwrap();
        let nu2 = nu_hat_sq(&shifted, &structure, est2.delta_hat).unwrap().0;
        let om2 = omega_hat_sq(&shifted).unwrap();
        let pfe2 = omega_pfe(&shifted, &structure, HcCorrection::Hc1).unwrap();
        assert!((nu - nu2).abs() < 1e-9 * nu.max(1.0));
        assert!((om - om2).abs() < 1e-9 * om.max(1.0));
        assert!((pfe - pfe2).abs() < 1e-9 * pfe.max(1.0));
    }

    #[test]
    fn omega_matrix_route_equals_closed_form() {
        for seed in 0..40 {
            let (sample, _) = random_sample(300 + seed, 5 + (seed as usize % 30), 0);
            let omega = omega_hat_sq(&sample).unwrap();

            // Closed form from the residual display.
            let n2 = sample.n_units() as f64;
            let n = sample.n_pairs() as f64;
            let est = wald_estimate(&sample).unwrap();
            let y_bar = sample.y().iter().sum::<f64>() / n2;
            let d_bar = sample.d().iter().map(|&v| v as f64).sum::<f64>() / n2;
            let mut ssr = 0.0;
            for i in 0..sample.n_units() {
                let u = sample.y()[i] - y_bar - (sample.d()[i] as f64 - d_bar) * est.delta_hat;
                ssr += u * u;
            }
            let sum_ad: f64 = (0..sample.n_units())
                .filter(|&i| sample.a()[i] == 1)
                .map(|i| sample.d()[i] as f64)
                .sum();
            let sum_d: f64 = sample.d().iter().map(|&v| v as f64).sum();
            let denom = 2.0 / n * sum_ad - sum_d / n;
            let closed = (ssr / n) / (denom * denom);
            let rel = (omega - closed).abs() / closed.max(1e-12);
            assert!(rel < 1e-10, "seed {seed}: omega {omega} vs closed {closed}");
        }
    }

    #[test]
    fn pfe_closed_form_equals_sandwich_route() {
        for seed in 0..40 {
            let (sample, structure) = random_sample(600 + seed, 4 + (seed as usize % 46), 0);
            let hc0 = omega_pfe(&sample, &structure, HcCorrection::Hc0).unwrap();
            let hc1 = omega_pfe(&sample, &structure, HcCorrection::Hc1).unwrap();

            let n = sample.n_units();
            let d = DMatrix::from_fn(n, 1, |i, _| sample.d()[i] as f64);
            let a = DMatrix::from_fn(n, 1, |i, _| sample.a()[i] as f64);
            let none: DMatrix<f64> = DMatrix::zeros(n, 0);
            let fit =
                regression::tsls_with_pair_fe(sample.y(), &d, &none, &a, &structure).unwrap();
            let sandwich = sample.n_pairs() as f64 * fit.robust_vcov[(0, 0)];
            let rel = (hc0 - sandwich).abs() / sandwich.max(1e-12);
            assert!(rel < 1e-8, "seed {seed}: hc0 {hc0} vs sandwich {sandwich}");

            let n_pairs = sample.n_pairs() as f64;
            let factor = 2.0 * n_pairs / (n_pairs - 1.0);
            assert_eq!(hc1, hc0 * factor);
        }
    }

    #[test]
    fn pfe_requires_one_treated_per_pair() {
        let (sample, structure) = micro_sample();
        let bad = ObservedSample::new(
            sample.y().clone(),
            sample.d().to_vec(),
            vec![1, 1, 0, 0],
            sample.x().clone(),
            sample.w().clone(),
        )
        .unwrap();
        match omega_pfe(&bad, &structure, HcCorrection::Hc0) {
            Err(Error::PairsNotOneTreated(labels)) => assert_eq!(labels.len(), 2),
            other => panic!("expected pairing error, got {other:?}"),
        }
    }

    #[test]
    fn micro_example_pfe_is_zero() {
        let (sample, structure) = micro_sample();
        assert_eq!(omega_pfe(&sample, &structure, HcCorrection::Hc0).unwrap(), 0.0);
        assert_eq!(omega_pfe(&sample, &structure, HcCorrection::Hc1).unwrap(), 0.0);
    }

    #[test]
    fn adjusted_with_zero_models_equals_unadjusted() {
        let (sample, structure) = random_sample(24, 23, 1);
        let est = wald_estimate(&sample).unwrap();
        let (nu, _) = nu_hat_sq(&sample, &structure, est.delta_hat).unwrap();
        let zero = WorkingModels::zero(sample.n_units());
        let adj = adjusted_estimate(&sample, &zero).unwrap();
        let (nu_adj, _) =
            nu_hat_sq_adj(&sample, &structure, adj.delta_hat, &zero, adj.phi_adj).unwrap();
        assert!((nu - nu_adj).abs() <= 1e-12 * nu.max(1.0));
    }

    // ----- DGP-analytic oracles (quadrature over the model equations) -----

    /// Complier probability for the no-covariates designs by Simpson
    /// quadrature of (1 - 0.2x)(0.5 + 0.2x) over x in [0, 1].
    fn s51_complier_share() -> f64 {
        simpson(|x| (1.0 - 0.2 * x) * (0.5 + 0.2 * x), 0.0, 1.0, 4096)
    }

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
        let h = (hi - lo) / steps as f64;
        let mut acc = f(lo) + f(hi);
        for k in 1..steps {
            let x = lo + k as f64 * h;
            acc += f(x) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn mean_over_reps(
        reps: usize,
        n_units: usize,
        seed: u64,
        mut stat: impl FnMut(&ObservedSample<f64>, &PairStructure, f64) -> f64,
    ) -> f64 {
        let spec = DgpSpec::no_covariates(1, 0.0).unwrap();
        let mut total = 0.0;
        for r in 0..reps {
            let potential = generate::<f64>(&spec, n_units, seed + r as u64).unwrap();
            let x: Vec<f64> = potential.x().column(0).iter().copied().collect();
            let structure = match_pairs_scalar(&x).unwrap();
            let mut rng = stream_rng(seed ^ 0xa5a5_5a5a, r as u64);
            let mut a = vec![0u8; n_units];
            for [u, v] in structure.pairs() {
                if uniform(&mut rng) < 0.5 {
                    a[*u] = 1;
                } else {
                    a[*v] = 1;
                }
            }
            let sample = potential.observe(&a).unwrap();
            let est = wald_estimate(&sample).unwrap();
            total += stat(&sample, &structure, est.delta_hat);
        }
        total / reps as f64
    }

    /// Model 1 has conditional variance 1 in both arms and no systematic
    /// arm contrast, so the limiting variance is 2 / P(complier)^2 and the
    /// conventional estimator's limit adds var(E[Y|X]) = 2 * var(X) / P^2.
    #[test]
    fn model1_nu_matches_quadrature_limit() {
        let p = s51_complier_share();
        let target = 2.0 / (p * p);
        let mean = mean_over_reps(200, 1600, 9000, |s, st, d| {
            nu_hat_sq(s, st, d).unwrap().0
        });
        let rel = (mean - target).abs() / target;
        assert!(rel < 0.05, "mean nu^2 {mean} vs limit {target} (rel {rel})");
    }

    #[test]
    fn model1_omega_matches_quadrature_limit() {
        let p = s51_complier_share();
        // var[Y*(a)] = E var[.|X] + var E[.|X] = 1 + var(X - 1/2) = 1 + 1/12.
        let target = (2.0 + 2.0 / 12.0) / (p * p);
        let mean = mean_over_reps(200, 1600, 9100, |s, _, _| omega_hat_sq(s).unwrap());
        let rel = (mean - target).abs() / target;
        assert!(rel < 0.05, "mean omega^2 {mean} vs limit {target} (rel {rel})");
    }

    #[test]
    fn model1_pfe_hc1_matches_quadrature_limit() {
        let p = s51_complier_share();
        // Model 1 has E[Y*(1) - Y*(0) | X] = 0, so the HC1 limit equals nu^2.
        let target = 2.0 / (p * p);
        let mean = mean_over_reps(200, 1600, 9200, |s, st, _| {
            omega_pfe(s, st, HcCorrection::Hc1).unwrap()
        });
        let rel = (mean - target).abs() / target;
        assert!(rel < 0.05, "mean pfe hc1 {mean} vs limit {target} (rel {rel})");
    }

    /// Under perfect compliance with outcomes independent of x, the strict
    /// inequality in the conventional-variance comparison collapses.
    #[test]
    fn omega_equals_nu_when_covariates_are_irrelevant() {
        let n_units = 3200;
        let reps = 100;
        let (mut sum_nu, mut sum_om) = (0.0, 0.0);
        for r in 0..reps {
            let mut rng = stream_rng(43_000, r);
            let x: Vec<f64> = (0..n_units).map(|_| uniform(&mut rng)).collect();
            let structure = match_pairs_scalar(&x).unwrap();
            let mut a = vec![0u8; n_units];
            for [u, v] in structure.pairs() {
                if uniform(&mut rng) < 0.5 {
                    a[*u] = 1;
                } else {
                    a[*v] = 1;
                }
            }
            let y = DVector::from_fn(n_units, |_, _| standard_normal(&mut rng));
            let sample = ObservedSample::new(
                y,
                a.clone(),
                a.clone(),
                DMatrix::from_column_slice(n_units, 1, &x),
                DMatrix::zeros(n_units, 0),
            )
            .unwrap();
            let est = wald_estimate(&sample).unwrap();
            sum_nu += nu_hat_sq(&sample, &structure, est.delta_hat).unwrap().0;
            sum_om += omega_hat_sq(&sample).unwrap();
        }
        let (mean_nu, mean_om) = (sum_nu / reps as f64, sum_om / reps as f64);
        let rel = (mean_om - mean_nu).abs() / mean_nu;
        assert!(rel < 0.05, "nu {mean_nu} vs omega {mean_om} (rel {rel})");
    }

    /// Correctly-specified working models cannot increase the adjusted
    /// variance relative to the unadjusted one.
    #[test]
    fn oracle_adjustment_does_not_increase_variance() {
        let spec = DgpSpec::with_covariates(1, 0.0).unwrap();
        let n_units = 1600;
        let reps = 200;
        let (mut sum_nu, mut sum_adj) = (0.0, 0.0);
        for r in 0..reps {
            let potential = generate::<f64>(&spec, n_units, 77_000 + r).unwrap();
            let x: Vec<f64> = potential.x().column(0).iter().copied().collect();
            let structure = match_pairs_scalar(&x).unwrap();
            let mut rng = stream_rng(78_000, r);
            let mut a = vec![0u8; n_units];
            for [u, v] in structure.pairs() {
                if uniform(&mut rng) < 0.5 {
                    a[*u] = 1;
                } else {
                    a[*v] = 1;
                }
            }
            let sample = potential.observe(&a).unwrap();
            let est = wald_estimate(&sample).unwrap();
            sum_nu += nu_hat_sq(&sample, &structure, est.delta_hat).unwrap().0;

            // True conditional means of the model-1 design at mu1 = 0:
            // E[Ytilde(a)|X,W] = gamma (W - 1/2), E[D(a)|X,W] from the
            // take-up thresholds.
            let gamma = 4.0;
            let n = sample.n_units();
            let mut m_y = DMatrix::zeros(n, 2);
            let mut m_d = DMatrix::zeros(n, 2);
            for i in 0..n {
                let (xv, wv) = (sample.x()[(i, 0)], sample.w()[(i, 0)]);
                let p0 = (0.2 * xv + 0.2 * wv * xv).clamp(0.0, 1.0);
                let p1 = p0 + (1.0 - p0) * (0.75 + 0.2 * xv + 0.2 * wv * xv).clamp(0.0, 1.0);
                m_y[(i, 0)] = gamma * (wv - 0.5);
                m_y[(i, 1)] = gamma * (wv - 0.5);
                m_d[(i, 0)] = p0;
                m_d[(i, 1)] = p1;
            }
            let models = WorkingModels::new(m_y, m_d).unwrap();
            let adj = adjusted_estimate(&sample, &models).unwrap();
            sum_adj += nu_hat_sq_adj(&sample, &structure, adj.delta_hat, &models, adj.phi_adj)
                .unwrap()
                .0;
        }
        let (mean_nu, mean_adj) = (sum_nu / reps as f64, sum_adj / reps as f64);
        assert!(
            mean_adj <= mean_nu,
            "oracle-adjusted variance {mean_adj} should not exceed {mean_nu}"
        );
    }
}
