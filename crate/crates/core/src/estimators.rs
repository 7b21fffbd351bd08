//! Point estimators of the local average treatment effect: the unadjusted
//! Wald ratio, covariate-adjusted estimators built from working models, the
//! optimal linear working models (fitted by pair-fixed-effects regression),
//! and the no-fixed-effects "naive" two-stage least squares estimator.

use nalgebra::{DMatrix, DVector};

use crate::data::{ObservedSample, PairStructure};
use crate::error::{Error, Result};
use crate::regression::{self, FitResult};
use crate::scalar::{count, real, Scalar};

/// Default tolerance on the estimated take-up gap below which the ratio
/// estimator is refused.
pub const FIRST_STAGE_TOL: f64 = 1e-8;

/// Arm means of outcome and take-up, each normalized by the pair count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMeans<F: Scalar = f64> {
    /// `psi[a]` = sum of `y` over units with `A_i = a`, divided by `n`.
    pub psi: [F; 2],
    /// `phi[a]` = sum of `d` over units with `A_i = a`, divided by `n`.
    pub phi: [F; 2],
}

impl<F: Scalar> CellMeans<F> {
    /// Computes arm means. The `1/n` normalization presumes exactly `n`
    /// units per arm, so unbalanced assignments are refused.
    pub fn compute(sample: &ObservedSample<F>) -> Result<Self> {
        let n = sample.n_pairs();
        let treated = sample.treated_count();
        if treated != n {
            return Err(Error::UnbalancedAssignment {
                treated,
                control: sample.n_units() - treated,
            });
        }
        let n_f: F = count(n);
        let mut psi = [F::zero(); 2];
        let mut phi = [F::zero(); 2];
        for i in 0..sample.n_units() {
            let arm = sample.a()[i] as usize;
            psi[arm] += sample.y()[i];
            phi[arm] += count::<F>(sample.d()[i] as usize);
        }
        psi[0] /= n_f;
        psi[1] /= n_f;
        phi[0] /= n_f;
        phi[1] /= n_f;
        Ok(CellMeans { psi, phi })
    }

    /// Estimated complier share `phi(1) - phi(0)`.
    pub fn first_stage(&self) -> F {
        self.phi[1] - self.phi[0]
    }
}

/// The Wald estimate together with the cell means it was built from.
#[derive(Debug, Clone, Copy)]
pub struct WaldEstimate<F: Scalar = f64> {
    pub delta_hat: F,
    pub cells: CellMeans<F>,
}

/// Ratio of arm differences: `(psi(1) - psi(0)) / (phi(1) - phi(0))`.
///
/// Numerically identical to the two-stage least squares slope of `y` on
/// `(1, d)` with `(1, a)` as instruments.
pub fn wald_estimate<F: Scalar>(sample: &ObservedSample<F>) -> Result<WaldEstimate<F>> {
    wald_estimate_with_tol(sample, FIRST_STAGE_TOL)
}

pub fn wald_estimate_with_tol<F: Scalar>(
    sample: &ObservedSample<F>,
    first_stage_tol: f64,
) -> Result<WaldEstimate<F>> {
    let cells = CellMeans::compute(sample)?;
    let gap = cells.first_stage();
    if gap.abs() <= real(first_stage_tol) {
        return Err(Error::WeakFirstStage {
            phi1: cells.phi[1].to_f64().unwrap_or(f64::NAN),
            phi0: cells.phi[0].to_f64().unwrap_or(f64::NAN),
            gap: gap.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(WaldEstimate {
        delta_hat: (cells.psi[1] - cells.psi[0]) / gap,
        cells,
    })
}

/// Elementwise transformed outcome `y_i - delta * d_i`.
pub fn transformed_outcomes<F: Scalar>(sample: &ObservedSample<F>, delta: F) -> DVector<F> {
    DVector::from_fn(sample.n_units(), |i, _| {
        sample.y()[i] - delta * count::<F>(sample.d()[i] as usize)
    })
}

/// Per-unit fitted working-model values for both assignment arms.
///
/// Column `a` of `m_y` holds the fitted proxy for the arm-`a`
/// intention-to-treat outcome mean; `m_d` likewise for take-up. Models are
/// stored as fitted values so user-supplied or nonparametric fits plug in
/// uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingModels<F: Scalar = f64> {
    m_y: DMatrix<F>,
    m_d: DMatrix<F>,
}

impl<F: Scalar> WorkingModels<F> {
    pub fn new(m_y: DMatrix<F>, m_d: DMatrix<F>) -> Result<Self> {
        for (name, m) in [("m_y", &m_y), ("m_d", &m_d)] {
            if m.ncols() != 2 {
                return Err(Error::Config(format!(
                    "working models {name} must have one column per arm"
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "working models {name} contain non-finite values"
                )));
            }
        }
        if m_y.nrows() != m_d.nrows() {
            return Err(Error::Config("working model row counts differ".into()));
        }
        Ok(Self { m_y, m_d })
    }

    /// All-zero models; the adjusted estimator then reduces to the Wald
    /// estimator exactly.
    pub fn zero(n_units: usize) -> Self {
        Self {
            m_y: DMatrix::zeros(n_units, 2),
            m_d: DMatrix::zeros(n_units, 2),
        }
    }

    /// Arm-invariant models from a single fitted column.
    pub fn arm_invariant(m_y: DVector<F>, m_d: DVector<F>) -> Result<Self> {
        let n = m_y.len();
        let my = DMatrix::from_fn(n, 2, |i, _| m_y[i]);
        let md = DMatrix::from_fn(n, 2, |i, _| m_d[i]);
        Self::new(my, md)
    }

    pub fn n_units(&self) -> usize {
        self.m_y.nrows()
    }

    pub fn m_y(&self) -> &DMatrix<F> {
        &self.m_y
    }

    pub fn m_d(&self) -> &DMatrix<F> {
        &self.m_d
    }

    /// Combined proxy for the transformed outcome:
    /// `m_{a,YD} = m_{a,Y} - delta * m_{a,D}`, one column per arm.
    pub fn combined(&self, delta: F) -> DMatrix<F> {
        let mut out = self.m_y.clone();
        out -= &self.m_d * delta;
        out
    }
}

/// Covariate-adjusted arm means and the adjusted ratio estimate.
#[derive(Debug, Clone, Copy)]
pub struct AdjustedEstimate<F: Scalar = f64> {
    pub delta_hat: F,
    pub psi_adj: [F; 2],
    pub phi_adj: [F; 2],
}

impl<F: Scalar> AdjustedEstimate<F> {
    pub fn first_stage(&self) -> F {
        self.phi_adj[1] - self.phi_adj[0]
    }
}

/// Adjusted arm means: `(2n)^-1 sum(2 1{A_i=a}(v_i - m_a_i) + m_a_i)`.
pub(crate) fn adjusted_cells<F: Scalar>(
    sample: &ObservedSample<F>,
    models: &WorkingModels<F>,
) -> ([F; 2], [F; 2]) {
    let n2: F = count(sample.n_units());
    let two = real::<F>(2.0);
    let mut psi = [F::zero(); 2];
    let mut phi = [F::zero(); 2];
    for i in 0..sample.n_units() {
        let arm = sample.a()[i] as usize;
        let y = sample.y()[i];
        let d: F = count(sample.d()[i] as usize);
        for a in 0..2 {
            let ind = if arm == a { F::one() } else { F::zero() };
            let my = models.m_y()[(i, a)];
            let md = models.m_d()[(i, a)];
            psi[a] += two * ind * (y - my) + my;
            phi[a] += two * ind * (d - md) + md;
        }
    }
    for a in 0..2 {
        psi[a] /= n2;
        phi[a] /= n2;
    }
    (psi, phi)
}

/// Covariate-adjusted ratio estimator for arbitrary working models.
///
/// With the optimal linear models of `fit_linear_working_models` this is
/// numerically identical to the slope of the pair-fixed-effects IV
/// regression; with zero models it reduces to the Wald estimator.
pub fn adjusted_estimate<F: Scalar>(
    sample: &ObservedSample<F>,
    models: &WorkingModels<F>,
) -> Result<AdjustedEstimate<F>> {
    if models.n_units() != sample.n_units() {
        return Err(Error::Config(format!(
            "working models cover {} units, sample has {}",
            models.n_units(),
            sample.n_units()
        )));
    }
    let (psi_adj, phi_adj) = adjusted_cells(sample, models);
    let gap = phi_adj[1] - phi_adj[0];
    if gap.abs() <= real(FIRST_STAGE_TOL) {
        return Err(Error::WeakFirstStage {
            phi1: phi_adj[1].to_f64().unwrap_or(f64::NAN),
            phi0: phi_adj[0].to_f64().unwrap_or(f64::NAN),
            gap: gap.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(AdjustedEstimate {
        delta_hat: (psi_adj[1] - psi_adj[0]) / gap,
        psi_adj,
        phi_adj,
    })
}

/// Which columns of the sample enter the linear adjustment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ZetaSpec {
    /// All `w` columns.
    WOnly,
    /// All `x` columns followed by all `w` columns.
    XAndW,
    /// An explicit column selection.
    Columns(Vec<ZetaColumn>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZetaColumn {
    /// Zero-based index into the `x` block.
    X(usize),
    /// Zero-based index into the `w` block.
    W(usize),
}

impl ZetaSpec {
    /// Builds the transformation matrix. Constant columns are dropped (the
    /// intercept lives in the pair fixed effects); their names are returned
    /// separately so callers can report them.
    pub fn build<F: Scalar>(
        &self,
        sample: &ObservedSample<F>,
    ) -> Result<(DMatrix<F>, Vec<String>, Vec<String>)> {
        let columns: Vec<ZetaColumn> = match self {
            ZetaSpec::WOnly => (0..sample.w().ncols()).map(ZetaColumn::W).collect(),
            ZetaSpec::XAndW => (0..sample.x().ncols())
                .map(ZetaColumn::X)
                .chain((0..sample.w().ncols()).map(ZetaColumn::W))
                .collect(),
            ZetaSpec::Columns(cols) => cols.clone(),
        };
        if columns.is_empty() {
            return Err(Error::Config(
                "zeta selects no columns (is the w block empty?)".into(),
            ));
        }
        let n = sample.n_units();
        let mut kept: Vec<(String, Vec<F>)> = Vec::new();
        let mut dropped = Vec::new();
        for col in columns {
            let (name, values): (String, Vec<F>) = match col {
                ZetaColumn::X(j) => {
                    if j >= sample.x().ncols() {
                        return Err(Error::Config(format!(
                            "zeta column x{} out of range ({} x columns)",
                            j + 1,
                            sample.x().ncols()
                        )));
                    }
                    (format!("x{}", j + 1), sample.x().column(j).iter().copied().collect())
                }
                ZetaColumn::W(j) => {
                    if j >= sample.w().ncols() {
                        return Err(Error::Config(format!(
                            "zeta column w{} out of range ({} w columns)",
                            j + 1,
                            sample.w().ncols()
                        )));
                    }
                    (format!("w{}", j + 1), sample.w().column(j).iter().copied().collect())
                }
            };
            let constant = values.windows(2).all(|p| p[0] == p[1]);
            if constant {
                dropped.push(name);
            } else {
                kept.push((name, values));
            }
        }
        if kept.is_empty() {
            return Err(Error::Config(
                "every selected zeta column is constant".into(),
            ));
        }
        let mut zeta = DMatrix::zeros(n, kept.len());
        let mut names = Vec::with_capacity(kept.len());
        for (j, (name, values)) in kept.into_iter().enumerate() {
            for (i, v) in values.into_iter().enumerate() {
                zeta[(i, j)] = v;
            }
            names.push(name);
        }
        Ok((zeta, names, dropped))
    }
}

/// Optimal linear working models and the regressions that produced them.
#[derive(Debug, Clone)]
pub struct LinearWorkingModels<F: Scalar = f64> {
    pub models: WorkingModels<F>,
    pub beta_y: DVector<F>,
    pub beta_d: DVector<F>,
    pub zeta_names: Vec<String>,
    pub dropped_constant: Vec<String>,
}

/// Fits the outcome and take-up regressions on assignment, `zeta` and pair
/// fixed effects (by within-pair demeaning), and returns arm-invariant
/// fitted values `zeta' beta`.
pub fn fit_linear_working_models<F: Scalar>(
    sample: &ObservedSample<F>,
    structure: &PairStructure,
    zeta_spec: &ZetaSpec,
) -> Result<LinearWorkingModels<F>> {
    if structure.n_units() != sample.n_units() {
        return Err(Error::InvalidPairing(format!(
            "structure covers {} units, sample has {}",
            structure.n_units(),
            sample.n_units()
        )));
    }
    let (zeta, zeta_names, dropped_constant) = zeta_spec.build(sample)?;
    let p = zeta.ncols();

    let a_col = DMatrix::from_fn(sample.n_units(), 1, |i, _| {
        count::<F>(sample.a()[i] as usize)
    });
    let mut design = DMatrix::zeros(sample.n_units(), 1 + p);
    design.column_mut(0).copy_from(&a_col.column(0));
    design.columns_mut(1, p).copy_from(&zeta);
    let design_t = regression::fwl_partial_out(&design, structure)?;

    let fit_col = |target: &DVector<F>| -> Result<DVector<F>> {
        let target_t = regression::fwl_partial_out_vector(target, structure)?;
        let fit = regression::ols(&target_t, &design_t).map_err(|e| match e {
            Error::RankDeficient { column } if column >= 1 => Error::Config(format!(
                "zeta column {} has no within-pair variation after demeaning",
                zeta_names[column - 1]
            )),
            Error::RankDeficient { .. } => Error::Config(
                "assignment has no within-pair variation".into(),
            ),
            other => other,
        })?;
        Ok(DVector::from_iterator(
            p,
            (0..p).map(|j| fit.coefficients[1 + j]),
        ))
    };

    let beta_y = fit_col(sample.y())?;
    let beta_d = fit_col(&sample.d_vector())?;

    let m_y = &zeta * &beta_y;
    let m_d = &zeta * &beta_d;
    Ok(LinearWorkingModels {
        models: WorkingModels::arm_invariant(m_y, m_d)?,
        beta_y,
        beta_d,
        zeta_names,
        dropped_constant,
    })
}

/// The "naive" estimator: two-stage least squares of `y` on a constant,
/// `d` and the `w` covariates, with `a` instrumenting `d` and no pair
/// fixed effects.
#[derive(Debug, Clone)]
pub struct NaiveEstimate<F: Scalar = f64> {
    pub delta_hat: F,
    /// Implied arm-invariant working models (`w` coefficients of the
    /// no-fixed-effects outcome and take-up regressions on `(1, a, w)`),
    /// used when this estimator's variance is computed with the adjusted
    /// pairs-of-pairs formula.
    pub models: WorkingModels<F>,
    pub fit: FitResult<F>,
}

pub fn naive_adjusted_estimate<F: Scalar>(sample: &ObservedSample<F>) -> Result<NaiveEstimate<F>> {
    let k_w = sample.w().ncols();
    if k_w == 0 {
        return Err(Error::Config(
            "naive estimator needs at least one w column".into(),
        ));
    }
    let n = sample.n_units();
    let d_col = DMatrix::from_fn(n, 1, |i, _| count::<F>(sample.d()[i] as usize));
    let a_col = DMatrix::from_fn(n, 1, |i, _| count::<F>(sample.a()[i] as usize));
    let mut exog = DMatrix::zeros(n, 1 + k_w);
    exog.column_mut(0).fill(F::one());
    exog.columns_mut(1, k_w).copy_from(sample.w());

    let fit = regression::tsls(sample.y(), &d_col, &exog, &a_col)?;
    let delta_hat = fit.coefficients[0];

    // Implied working models: w coefficients from OLS on (1, a, w).
    let mut design = DMatrix::zeros(n, 2 + k_w);
    design.column_mut(0).fill(F::one());
    design.column_mut(1).copy_from(&a_col.column(0));
    design.columns_mut(2, k_w).copy_from(sample.w());
    let w_coefs = |target: &DVector<F>| -> Result<DVector<F>> {
        let fit = regression::ols(target, &design)?;
        Ok(DVector::from_iterator(
            k_w,
            (0..k_w).map(|j| fit.coefficients[2 + j]),
        ))
    };
    let gamma_y = w_coefs(sample.y())?;
    let gamma_d = w_coefs(&sample.d_vector())?;
    let models = WorkingModels::arm_invariant(sample.w() * gamma_y, sample.w() * gamma_d)?;

    Ok(NaiveEstimate {
        delta_hat,
        models,
        fit,
    })
}
