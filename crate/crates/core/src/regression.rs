//! Dense OLS and just-identified two-stage least squares with
//! heteroskedasticity-robust (HC0) covariance, plus within-pair demeaning.
//!
//! This module is the computational substrate for the closed-form
//! estimators: every closed form elsewhere in the crate is cross-checked
//! against a regression computed here, and the pair-fixed-effects variants
//! are computed by demeaning (Frisch-Waugh-Lovell) rather than by
//! materializing `n` dummy columns.

use nalgebra::{DMatrix, DVector};

use crate::data::PairStructure;
use crate::error::{Error, Result};
use crate::scalar::{real, Scalar};

/// Relative tolerance on the pivoted-QR diagonal used for rank detection.
const RANK_TOL: f64 = 1e-10;

/// Relative pivot tolerance below which Z'X is treated as singular.
const SINGULAR_TOL: f64 = 1e-12;

/// A fitted regression: coefficients, residuals and the HC0 sandwich.
///
/// `robust_vcov` is the covariance of the coefficient vector itself (no
/// sample-size scaling); variance estimators that report per-sqrt(n)
/// variances apply their own scaling on top.
#[derive(Debug, Clone)]
pub struct FitResult<F: Scalar = f64> {
    pub coefficients: DVector<F>,
    pub residuals: DVector<F>,
    pub robust_vcov: DMatrix<F>,
}

fn hcat<F: Scalar>(blocks: &[&DMatrix<F>]) -> DMatrix<F> {
    let nrows = blocks
        .iter()
        .find(|b| b.ncols() > 0)
        .map_or(0, |b| b.nrows());
    let ncols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(*b);
        at += b.ncols();
    }
    out
}

/// `Z' diag(u^2) Z` without materializing the diagonal.
fn sandwich_meat<F: Scalar>(z: &DMatrix<F>, residuals: &DVector<F>) -> DMatrix<F> {
    let mut scaled = z.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        let u2 = residuals[i] * residuals[i];
        row *= u2;
    }
    z.transpose() * scaled
}

fn symmetrize<F: Scalar>(m: DMatrix<F>) -> DMatrix<F> {
    let half = real::<F>(0.5);
    let mt = m.transpose();
    (m + mt) * half
}

/// Ordinary least squares via column-pivoted QR.
///
/// The design must have full column rank: the decomposition's diagonal is
/// screened at `RANK_TOL` relative to its largest entry and the first
/// offending original column index is reported on failure.
pub fn ols<F: Scalar>(y: &DVector<F>, x: &DMatrix<F>) -> Result<FitResult<F>> {
    let n = x.nrows();
    let k = x.ncols();
    if y.len() != n {
        return Err(Error::Config(format!(
            "ols: y has {} rows, design has {n}",
            y.len()
        )));
    }
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "ols: need 1 <= k <= n, got n = {n}, k = {k}"
        )));
    }

    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let p = qr.p();

    // Original column index occupying each pivot slot.
    let mut slot_to_col = DVector::from_iterator(k, 0..k);
    p.permute_rows(&mut slot_to_col);

    let scale = r[(0, 0)].abs();
    let tol = real::<F>(RANK_TOL) * scale;
    for i in 0..k {
        if r[(i, i)].abs() <= tol {
            return Err(Error::RankDeficient {
                column: slot_to_col[i],
            });
        }
    }

    let qty = qr.q().transpose() * y;
    let gamma = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient { column: 0 })?;
    let mut coefficients = DVector::zeros(k);
    for i in 0..k {
        coefficients[slot_to_col[i]] = gamma[i];
    }

    let residuals = y - x * &coefficients;

    // (X'X)^-1 from the triangular factor: P R^-1 R^-T P'.
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::RankDeficient { column: 0 })?;
    let g = &r_inv * r_inv.transpose();
    let mut bread = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            bread[(slot_to_col[i], slot_to_col[j])] = g[(i, j)];
        }
    }
    let meat = sandwich_meat(x, &residuals);
    let robust_vcov = symmetrize(&bread * meat * &bread);

    Ok(FitResult {
        coefficients,
        residuals,
        robust_vcov,
    })
}

/// Just-identified two-stage least squares.
///
/// Coefficients are `(Z'X)^-1 Z'y` with `X = [endog exog]` and
/// `Z = [instruments exog]`; `robust_vcov` is the full HC0 sandwich
/// `(Z'X)^-1 (sum u_i^2 z_i z_i') (X'Z)^-1`.
pub fn tsls<F: Scalar>(
    y: &DVector<F>,
    endog: &DMatrix<F>,
    exog: &DMatrix<F>,
    instruments: &DMatrix<F>,
) -> Result<FitResult<F>> {
    let n = y.len();
    if endog.ncols() != instruments.ncols() {
        return Err(Error::Config(format!(
            "tsls is just-identified: {} endogenous columns need {} instruments, got {}",
            endog.ncols(),
            endog.ncols(),
            instruments.ncols()
        )));
    }
    for (name, m) in [("endog", endog), ("exog", exog), ("instruments", instruments)] {
        if m.ncols() > 0 && m.nrows() != n {
            return Err(Error::Config(format!(
                "tsls: {name} has {} rows, expected {n}",
                m.nrows()
            )));
        }
    }
    let x = hcat(&[endog, exog]);
    let z = hcat(&[instruments, exog]);
    let k = x.ncols();
    if k == 0 || n < k {
        return Err(Error::Config(format!(
            "tsls: need 1 <= k <= n, got n = {n}, k = {k}"
        )));
    }

    let s = z.transpose() * &x;
    let lu = s.clone().lu();
    let u = lu.u();
    let mut max_pivot = F::zero();
    let mut min_pivot = F::max_value().unwrap();
    for i in 0..k {
        let p = u[(i, i)].abs();
        max_pivot = max_pivot.max(p);
        min_pivot = min_pivot.min(p);
    }
    if min_pivot <= real::<F>(SINGULAR_TOL) * max_pivot {
        return Err(Error::SingularMoments);
    }
    let bread = lu.try_inverse().ok_or(Error::SingularMoments)?;

    let coefficients = &bread * (z.transpose() * y);
    let residuals = y - &x * &coefficients;
    let meat = sandwich_meat(&z, &residuals);
    let robust_vcov = symmetrize(&bread * meat * bread.transpose());

    Ok(FitResult {
        coefficients,
        residuals,
        robust_vcov,
    })
}

/// Subtracts the within-pair mean from every entry of `v` (the projection
/// residual on the span of the pair dummies).
pub fn fwl_partial_out_vector<F: Scalar>(
    v: &DVector<F>,
    structure: &PairStructure,
) -> Result<DVector<F>> {
    if v.len() != structure.n_units() {
        return Err(Error::InvalidPairing(format!(
            "demeaning: vector has {} rows but structure covers {}",
            v.len(),
            structure.n_units()
        )));
    }
    let half = real::<F>(0.5);
    let mut out = v.clone();
    for [u, w] in structure.pairs() {
        let mean = (v[*u] + v[*w]) * half;
        out[*u] -= mean;
        out[*w] -= mean;
    }
    Ok(out)
}

/// Column-wise within-pair demeaning.
pub fn fwl_partial_out<F: Scalar>(
    m: &DMatrix<F>,
    structure: &PairStructure,
) -> Result<DMatrix<F>> {
    if m.ncols() == 0 {
        return Ok(m.clone());
    }
    if m.nrows() != structure.n_units() {
        return Err(Error::InvalidPairing(format!(
            "demeaning: matrix has {} rows but structure covers {}",
            m.nrows(),
            structure.n_units()
        )));
    }
    let half = real::<F>(0.5);
    let mut out = m.clone();
    for c in 0..m.ncols() {
        for [u, w] in structure.pairs() {
            let mean = (m[(*u, c)] + m[(*w, c)]) * half;
            out[(*u, c)] -= mean;
            out[(*w, c)] -= mean;
        }
    }
    Ok(out)
}

/// Two-stage least squares with pair fixed effects, computed by demeaning.
///
/// Returns coefficients, residuals and the robust-covariance block of the
/// non-fixed-effect regressors only; by the partitioned-inverse argument
/// this block equals the corresponding block of the full-dummy regression.
pub fn tsls_with_pair_fe<F: Scalar>(
    y: &DVector<F>,
    endog: &DMatrix<F>,
    exog: &DMatrix<F>,
    instruments: &DMatrix<F>,
    structure: &PairStructure,
) -> Result<FitResult<F>> {
    let y_t = fwl_partial_out_vector(y, structure)?;
    let endog_t = fwl_partial_out(endog, structure)?;
    let exog_t = fwl_partial_out(exog, structure)?;
    let instr_t = fwl_partial_out(instruments, structure)?;
    tsls(&y_t, &endog_t, &exog_t, &instr_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream_rng, uniform};
    use nalgebra::{DMatrix, DVector};

    fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| standard_normal(rng))
    }

    /// Kahan-compensated dot product, the extended-precision path for the
    /// normal-equations oracle.
    fn dot_compensated(a: &[f64], b: &[f64]) -> f64 {
        let (mut sum, mut c) = (0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let term = x * y - c;
            let t = sum + term;
            c = (t - sum) - term;
            sum = t;
        }
        sum
    }

    /// Solves (X'X) b = X'y with compensated accumulation and full-pivot
    /// Gaussian elimination; independent of the QR path under test.
    fn normal_equations_oracle(y: &DVector<f64>, x: &DMatrix<f64>) -> DVector<f64> {
        let k = x.ncols();
        let cols: Vec<Vec<f64>> = (0..k).map(|j| x.column(j).iter().copied().collect()).collect();
        let yv: Vec<f64> = y.iter().copied().collect();
        let mut a = DMatrix::zeros(k, k);
        let mut b = DVector::zeros(k);
        for i in 0..k {
            for j in 0..k {
                a[(i, j)] = dot_compensated(&cols[i], &cols[j]);
            }
            b[i] = dot_compensated(&cols[i], &yv);
        }
        a.full_piv_lu().solve(&b).expect("oracle system solvable")
    }

    #[test]
    fn ols_interpolates_exact_systems() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        let beta = DVector::from_vec(vec![2.0, -1.0, 0.5]);
        let y = &x * &beta;
        let fit = ols(&y, &x).unwrap();
        assert!((&fit.coefficients - &beta).amax() < 1e-12);
        assert!(fit.residuals.amax() < 1e-12);
    }

    #[test]
    fn ols_rejects_duplicated_column() {
        let mut rng = stream_rng(1, 0);
        let base = random_matrix(&mut rng, 20, 1);
        let x = hcat(&[&base, &base]);
        let y = DVector::from_fn(20, |i, _| base[(i, 0)] + 0.1);
        match ols(&y, &x) {
            Err(Error::RankDeficient { column }) => assert!(column < 2),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn ols_matches_normal_equations_oracle() {
        let mut rng = stream_rng(2, 0);
        for _ in 0..20 {
            let x = random_matrix(&mut rng, 50, 3);
            let y = random_matrix(&mut rng, 50, 1).column(0).into_owned();
            let fit = ols(&y, &x).unwrap();
            let oracle = normal_equations_oracle(&y, &x);
            let rel = (&fit.coefficients - &oracle).amax() / oracle.amax().max(1.0);
            assert!(rel < 1e-10, "relative gap {rel}");
        }
    }

    #[test]
    fn tsls_with_exogenous_endog_equals_ols() {
        let mut rng = stream_rng(3, 0);
        let endog = random_matrix(&mut rng, 40, 1);
        let exog = {
            let mut m = DMatrix::from_element(40, 2, 1.0);
            m.column_mut(1)
                .iter_mut()
                .for_each(|v| *v = standard_normal(&mut rng));
            m
        };
        let y = DVector::from_fn(40, |i, _| {
            2.0 * endog[(i, 0)] + exog[(i, 1)] - 0.5 + 0.1 * standard_normal(&mut rng)
        });
        let iv = tsls(&y, &endog, &exog, &endog).unwrap();
        let direct = ols(&y, &hcat(&[&endog, &exog])).unwrap();
        assert!((&iv.coefficients - &direct.coefficients).amax() < 1e-10);
        assert!((&iv.robust_vcov - &direct.robust_vcov).amax() < 1e-10);
    }

    #[test]
    fn tsls_micro_example_slope_is_two() {
        // y = (3,1,2,2), d = (1,0,0,0), a = (1,0,1,0); intercept plus one
        // endogenous regressor instrumented by a.
        let y: DVector<f64> = DVector::from_vec(vec![3.0, 1.0, 2.0, 2.0]);
        let d = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
        let ones = DMatrix::from_element(4, 1, 1.0);
        let a = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]);
        let fit = tsls(&y, &d, &ones, &a).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn tsls_matches_explicit_two_stage_computation() {
        let mut rng = stream_rng(4, 0);
        for _ in 0..20 {
            let n = 60;
            let instruments = random_matrix(&mut rng, n, 2);
            let exog = {
                let mut m = DMatrix::from_element(n, 2, 1.0);
                m.column_mut(1)
                    .iter_mut()
                    .for_each(|v| *v = standard_normal(&mut rng));
                m
            };
            let endog = DMatrix::from_fn(n, 2, |i, j| {
                instruments[(i, j)] + 0.5 * standard_normal(&mut rng)
            });
            let y = DVector::from_fn(n, |i, _| {
                endog[(i, 0)] - endog[(i, 1)] + exog[(i, 1)] + standard_normal(&mut rng)
            });
            let fit = tsls(&y, &endog, &exog, &instruments).unwrap();

            // Stage 1: project endog on Z = [instr exog]; Stage 2: OLS of y
            // on fitted endog and exog.
            let z = hcat(&[&instruments, &exog]);
            let first = ols_projection(&z, &endog);
            let design = hcat(&[&first, &exog]);
            let second = ols(&y, &design).unwrap();
            let rel = (&fit.coefficients - &second.coefficients).amax()
                / second.coefficients.amax().max(1.0);
            assert!(rel < 1e-10, "two-stage oracle gap {rel}");
        }
    }

    fn ols_projection(z: &DMatrix<f64>, target: &DMatrix<f64>) -> DMatrix<f64> {
        let mut fitted = DMatrix::zeros(target.nrows(), target.ncols());
        for j in 0..target.ncols() {
            let col = target.column(j).into_owned();
            let fit = ols(&col, z).unwrap();
            fitted.column_mut(j).copy_from(&(z * fit.coefficients));
        }
        fitted
    }

    #[test]
    fn tsls_rejects_singular_instrument_moments() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let endog = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]);
        // Instrument orthogonal to endog in the demeaned sense and constant:
        // Z'X collinear with the intercept row.
        let ones = DMatrix::from_element(4, 1, 1.0);
        let instr = DMatrix::from_element(4, 1, 2.0);
        match tsls(&y, &endog, &ones, &instr) {
            Err(Error::SingularMoments) => {}
            other => panic!("expected singular moments, got {other:?}"),
        }
    }

    #[test]
    fn instrument_orthogonality_holds_for_every_fit() {
        let mut rng = stream_rng(5, 0);
        for trial in 0..30 {
            let n = 30 + 2 * trial;
            let instruments = random_matrix(&mut rng, n, 1);
            let exog = {
                let mut m = DMatrix::from_element(n, 2, 1.0);
                m.column_mut(1)
                    .iter_mut()
                    .for_each(|v| *v = uniform(&mut rng));
                m
            };
            let endog = DMatrix::from_fn(n, 1, |i, _| {
                0.8 * instruments[(i, 0)] + 0.3 * standard_normal(&mut rng)
            });
            let y = DVector::from_fn(n, |i, _| {
                1.5 * endog[(i, 0)] + exog[(i, 1)] + standard_normal(&mut rng)
            });
            let fit = tsls(&y, &endog, &exog, &instruments).unwrap();
            let z = hcat(&[&instruments, &exog]);
            let gram = (z.transpose() * &fit.residuals).amax();
            let bound = 1e-8 * z.norm() * y.norm();
            assert!(gram <= bound, "orthogonality {gram} > {bound}");
        }
    }

    #[test]
    fn vcov_is_symmetric_with_nonnegative_diagonal() {
        let mut rng = stream_rng(6, 0);
        let x = random_matrix(&mut rng, 40, 3);
        let y = random_matrix(&mut rng, 40, 1).column(0).into_owned();
        let fit = ols(&y, &x).unwrap();
        let v = &fit.robust_vcov;
        let asym = (v - v.transpose()).amax() / v.amax();
        assert!(asym < 1e-12);
        for i in 0..3 {
            assert!(v[(i, i)] >= 0.0);
        }
    }

    #[test]
    fn demeaning_kills_constants_and_centers_pairs() {
        let s = PairStructure::with_identity_order(vec![[0, 1], [2, 3]]).unwrap();
        let c = DVector::from_element(4, 5.0);
        assert!(fwl_partial_out_vector(&c, &s).unwrap().amax() < 1e-15);
        let v = DVector::from_vec(vec![3.0, 1.0, 2.0, 2.0]);
        let out = fwl_partial_out_vector(&v, &s).unwrap();
        assert_eq!(out.as_slice(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn demeaning_matches_dummy_regression_residuals() {
        let mut rng = stream_rng(7, 0);
        let n_pairs = 6;
        let s = PairStructure::with_identity_order(
            (0..n_pairs).map(|j| [2 * j, 2 * j + 1]).collect(),
        )
        .unwrap();
        let v = DVector::from_fn(2 * n_pairs, |_, _| standard_normal(&mut rng));
        let fast = fwl_partial_out_vector(&v, &s).unwrap();
        let dummies = pair_dummies(&s);
        let fit = ols(&v, &dummies).unwrap();
        assert!((&fast - &fit.residuals).amax() < 1e-12);
    }

    fn pair_dummies(s: &PairStructure) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(s.n_units(), s.n_pairs());
        for (j, [u, v]) in s.pairs().iter().enumerate() {
            m[(*u, j)] = 1.0;
            m[(*v, j)] = 1.0;
        }
        m
    }

    /// Random matched-pair instance with a healthy first stage.
    fn random_pair_instance(
        rng: &mut rand_chacha::ChaCha8Rng,
        n_pairs: usize,
        k_exog: usize,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, PairStructure) {
        let n = 2 * n_pairs;
        let s = PairStructure::with_identity_order((0..n_pairs).map(|j| [2 * j, 2 * j + 1]).collect())
            .unwrap();
        let mut a = vec![0u8; n];
        for j in 0..n_pairs {
            if uniform(rng) < 0.5 {
                a[2 * j] = 1;
            } else {
                a[2 * j + 1] = 1;
            }
        }
        let d: Vec<f64> = a
            .iter()
            .map(|&ai| {
                let u = uniform(rng);
                // Complier w.p. 1/2, always-taker 1/4, never-taker 1/4.
                if u < 0.5 {
                    ai as f64
                } else if u < 0.75 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let exog = DMatrix::from_fn(n, k_exog, |_, _| standard_normal(rng));
        let y = DVector::from_fn(n, |i, _| {
            1.7 * d[i] + (0..k_exog).map(|c| exog[(i, c)]).sum::<f64>() + standard_normal(rng)
        });
        let endog = DMatrix::from_column_slice(n, 1, &d);
        let instr = DMatrix::from_fn(n, 1, |i, _| a[i] as f64);
        (y, endog, exog, instr, s)
    }

    #[test]
    fn pair_fe_fit_equals_full_dummy_fit() {
        let mut rng = stream_rng(8, 0);
        for trial in 0..40 {
            // n_pairs >= 4 keeps the full-dummy design unsaturated.
            let n_pairs = 4 + trial % 47;
            let (y, endog, exog, instr, s) = random_pair_instance(&mut rng, n_pairs, 2);
            let fe = match tsls_with_pair_fe(&y, &endog, &exog, &instr, &s) {
                Ok(f) => f,
                Err(Error::SingularMoments) => continue,
                Err(e) => panic!("{e}"),
            };

            let dummies = pair_dummies(&s);
            let exog_full = hcat(&[&exog, &dummies]);
            let full = match tsls(&y, &endog, &exog_full, &instr) {
                Ok(f) => f,
                Err(Error::SingularMoments) => continue,
                Err(e) => panic!("{e}"),
            };

            let k = 1 + exog.ncols();
            for i in 0..k {
                let rel = (fe.coefficients[i] - full.coefficients[i]).abs()
                    / full.coefficients[i].abs().max(1.0);
                assert!(rel < 1e-10, "coefficient {i} gap {rel}");
            }
            let block = full.robust_vcov.view((0, 0), (k, k));
            let scale = block.amax().max(1e-12);
            let gap = (&fe.robust_vcov - block).amax() / scale;
            assert!(gap < 1e-8, "vcov block gap {gap} at {n_pairs} pairs");

            // Residuals from the demeaned fit are the full-dummy residuals.
            assert!((&fe.residuals - &full.residuals).amax() < 1e-9);
        }
    }

    #[test]
    fn pair_fe_without_exog_is_mean_signed_difference() {
        let mut rng = stream_rng(9, 0);
        let n_pairs = 8;
        let n = 2 * n_pairs;
        let s = PairStructure::with_identity_order((0..n_pairs).map(|j| [2 * j, 2 * j + 1]).collect())
            .unwrap();
        let mut a = vec![0u8; n];
        for j in 0..n_pairs {
            if uniform(&mut rng) < 0.5 {
                a[2 * j] = 1;
            } else {
                a[2 * j + 1] = 1;
            }
        }
        let y = DVector::from_fn(n, |_, _| standard_normal(&mut rng));
        let a_mat = DMatrix::from_fn(n, 1, |i, _| a[i] as f64);
        let none: DMatrix<f64> = DMatrix::zeros(n, 0);
        // Endog = a instrumented by itself: OLS of y on demeaned a.
        let fit = tsls_with_pair_fe(&y, &a_mat, &none, &a_mat, &s).unwrap();
        let mut mean_diff = 0.0;
        for [u, v] in s.pairs() {
            let (t, c) = if a[*u] == 1 { (*u, *v) } else { (*v, *u) };
            mean_diff += y[t] - y[c];
        }
        mean_diff /= n_pairs as f64;
        assert!((fit.coefficients[0] - mean_diff).abs() < 1e-10);
    }
}
