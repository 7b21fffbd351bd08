//! Monte Carlo engine: repeated draw-match-assign-estimate-test cycles
//! with deterministic per-replication random streams, plus power curves
//! over a grid of treated-arm intercepts.
//!
//! Replication `r` consumes stream `r + 1` of the master seed end to end:
//! first the unit draws, then one assignment bit per pair. Aggregation
//! folds replications in index order, so results are bit-identical no
//! matter how many worker threads run the replications.

mod dgp;

pub use dgp::{delta0_oracle, generate, Delta0Estimate, DgpSpec, Family, PotentialData};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{ObservedSample, PairStructure};
use crate::error::{Error, Result};
use crate::estimators::{
    adjusted_cells, adjusted_estimate, fit_linear_working_models, naive_adjusted_estimate,
    wald_estimate, ZetaSpec,
};
use crate::inference::t_test;
use crate::pairing::{assign_pair, match_pairs_scalar};
use crate::rng::stream_rng;
use crate::variance::{nu_hat_sq, nu_hat_sq_adj, omega_hat_sq, omega_pfe_both};

/// A named estimator/standard-error combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum McTest {
    /// Wald estimator with the consistent pairs-of-pairs variance.
    Nu,
    /// Wald estimator with the conventional robust variance.
    Omega,
    /// Wald estimator with the pair-fixed-effects HC0 variance.
    OmegaPfeHc0,
    /// Wald estimator with the pair-fixed-effects HC1 variance.
    OmegaPfeHc1,
    /// No-fixed-effects 2SLS on (1, d, w) with the adjusted consistent
    /// variance built from its implied working models.
    Naive,
    /// Same point estimator with its own robust sandwich variance.
    NaiveRobust,
    /// Optimal linear adjustment (zeta = w) with the adjusted consistent
    /// variance.
    Pfe,
}

impl McTest {
    pub fn label(self) -> &'static str {
        match self {
            McTest::Nu => "nu",
            McTest::Omega => "omega",
            McTest::OmegaPfeHc0 => "omega-pfe-hc0",
            McTest::OmegaPfeHc1 => "omega-pfe-hc1",
            McTest::Naive => "naive",
            McTest::NaiveRobust => "naive-robust",
            McTest::Pfe => "pfe",
        }
    }

    /// Parses a CLI name; `unadj` is an alias for the Wald/nu test.
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "nu" | "unadj" => McTest::Nu,
            "omega" => McTest::Omega,
            "omega-pfe-hc0" => McTest::OmegaPfeHc0,
            "omega-pfe-hc1" => McTest::OmegaPfeHc1,
            "naive" => McTest::Naive,
            "naive-robust" => McTest::NaiveRobust,
            "pfe" => McTest::Pfe,
            _ => return None,
        })
    }

    fn needs_w(self) -> bool {
        matches!(self, McTest::Naive | McTest::NaiveRobust | McTest::Pfe)
    }
}

/// One Monte Carlo experiment.
#[derive(Debug, Clone, Serialize)]
pub struct McConfig {
    pub spec: DgpSpec,
    /// Sample size 2n per replication.
    pub n_units: usize,
    pub reps: usize,
    pub tests: Vec<McTest>,
    /// Null value the t-tests are run against.
    pub delta_null: f64,
    /// Estimand used for bias and RMSE (the oracle value at the spec's
    /// mu1).
    pub delta_true: f64,
    pub alpha: f64,
    pub seed: u64,
}

/// Aggregates for one test across replications.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct McTestSummary {
    pub test: McTest,
    /// Replications whose estimator and variance both succeeded.
    pub reps_used: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    pub rejection_mc_se: f64,
    pub bias: f64,
    pub bias_mc_se: f64,
    pub rmse: f64,
    pub var_mean: f64,
    pub var_sd: f64,
    /// Replications where a tiny-negative variance was clamped to zero.
    pub clamped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct McResult {
    pub spec: DgpSpec,
    pub n_units: usize,
    pub reps: usize,
    pub seed: u64,
    pub alpha: f64,
    pub delta_null: f64,
    pub delta_true: f64,
    pub tests: Vec<McTestSummary>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy)]
struct TestOutcome {
    delta: f64,
    variance: f64,
    reject: bool,
    clamped: bool,
}

fn one_rep(cfg: &McConfig, rep: usize) -> Vec<Option<TestOutcome>> {
    let mut rng = stream_rng(cfg.seed, rep as u64 + 1);
    let potential = dgp::generate_with_rng::<f64>(&cfg.spec, cfg.n_units, &mut rng);
    let x: Vec<f64> = potential.x().column(0).iter().copied().collect();
    let structure = match match_pairs_scalar(&x) {
        Ok(s) => s,
        Err(_) => return vec![None; cfg.tests.len()],
    };
    let mut a = vec![0u8; cfg.n_units];
    for [u, v] in structure.pairs() {
        assign_pair(&mut rng, &mut a, *u, *v);
    }
    let sample = match potential.observe(&a) {
        Ok(s) => s,
        Err(_) => return vec![None; cfg.tests.len()],
    };
    estimate_tests(&cfg.tests, &sample, &structure, cfg.delta_null, cfg.alpha)
}

/// Runs every requested test on one already-observed sample.
fn estimate_tests(
    tests: &[McTest],
    sample: &ObservedSample<f64>,
    structure: &PairStructure,
    delta_null: f64,
    alpha: f64,
) -> Vec<Option<TestOutcome>> {
    let wald_needed = tests.iter().any(|t| {
        matches!(
            t,
            McTest::Nu | McTest::Omega | McTest::OmegaPfeHc0 | McTest::OmegaPfeHc1
        )
    });
    let wald = if wald_needed {
        wald_estimate(sample).ok()
    } else {
        None
    };
    let pfe_both = wald.as_ref().and_then(|w| {
        if tests
            .iter()
            .any(|t| matches!(t, McTest::OmegaPfeHc0 | McTest::OmegaPfeHc1))
        {
            omega_pfe_both(sample, structure, w.delta_hat, w.cells.first_stage()).ok()
        } else {
            None
        }
    });
    let naive = if tests
        .iter()
        .any(|t| matches!(t, McTest::Naive | McTest::NaiveRobust))
    {
        naive_adjusted_estimate(sample).ok()
    } else {
        None
    };

    tests
        .iter()
        .map(|test| {
            let (delta, variance, clamped) = match test {
                McTest::Nu => {
                    let w = wald.as_ref()?;
                    let (v, parts) = nu_hat_sq(sample, structure, w.delta_hat).ok()?;
                    (w.delta_hat, v, parts.clamped)
                }
                McTest::Omega => {
                    let w = wald.as_ref()?;
                    (w.delta_hat, omega_hat_sq(sample).ok()?, false)
                }
                McTest::OmegaPfeHc0 => {
                    let w = wald.as_ref()?;
                    (w.delta_hat, pfe_both?.0, false)
                }
                McTest::OmegaPfeHc1 => {
                    let w = wald.as_ref()?;
                    (w.delta_hat, pfe_both?.1, false)
                }
                McTest::Naive => {
                    let est = naive.as_ref()?;
                    let (_, phi_adj) = adjusted_cells(sample, &est.models);
                    let (v, parts) =
                        nu_hat_sq_adj(sample, structure, est.delta_hat, &est.models, phi_adj)
                            .ok()?;
                    (est.delta_hat, v, parts.clamped)
                }
                McTest::NaiveRobust => {
                    let est = naive.as_ref()?;
                    let v = sample.n_pairs() as f64 * est.fit.robust_vcov[(0, 0)];
                    (est.delta_hat, v, false)
                }
                McTest::Pfe => {
                    let lin =
                        fit_linear_working_models(sample, structure, &ZetaSpec::WOnly).ok()?;
                    let adj = adjusted_estimate(sample, &lin.models).ok()?;
                    let (v, parts) = nu_hat_sq_adj(
                        sample,
                        structure,
                        adj.delta_hat,
                        &lin.models,
                        adj.phi_adj,
                    )
                    .ok()?;
                    (adj.delta_hat, v, parts.clamped)
                }
            };
            let t = t_test(delta, variance, sample.n_pairs(), delta_null, alpha).ok()?;
            Some(TestOutcome {
                delta,
                variance,
                reject: t.reject,
                clamped,
            })
        })
        .collect()
}

fn validate_config(cfg: &McConfig) -> Result<()> {
    if cfg.reps < 1 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if cfg.n_units < 4 || cfg.n_units % 2 != 0 {
        return Err(Error::Config(format!(
            "n_units must be even and >= 4, got {}",
            cfg.n_units
        )));
    }
    if cfg.tests.is_empty() {
        return Err(Error::Config("no tests requested".into()));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!(
            "alpha must lie in (0, 1), got {}",
            cfg.alpha
        )));
    }
    for t in &cfg.tests {
        if t.needs_w() && cfg.spec.k_w() == 0 {
            return Err(Error::Config(format!(
                "test {} needs adjustment covariates, but family {} has none",
                t.label(),
                cfg.spec.family.label()
            )));
        }
    }
    cfg.spec.validate()?;
    Ok(())
}

/// Runs the experiment. Deterministic in `(spec, seed, reps)` and in the
/// number of worker threads.
pub fn run_mc(cfg: &McConfig) -> Result<McResult> {
    validate_config(cfg)?;
    let outcomes: Vec<Vec<Option<TestOutcome>>> =
        (0..cfg.reps).into_par_iter().map(|r| one_rep(cfg, r)).collect();

    let mut summaries = Vec::with_capacity(cfg.tests.len());
    let mut warnings = Vec::new();
    for (ti, test) in cfg.tests.iter().enumerate() {
        let mut used = 0usize;
        let mut failures = 0usize;
        let mut rejections = 0usize;
        let mut clamped = 0usize;
        let (mut sum_err, mut sum_err_sq) = (0.0f64, 0.0f64);
        let (mut sum_var, mut sum_var_sq) = (0.0f64, 0.0f64);
        for rep in &outcomes {
            match rep[ti] {
                Some(o) => {
                    used += 1;
                    if o.reject {
                        rejections += 1;
                    }
                    if o.clamped {
                        clamped += 1;
                    }
                    let err = o.delta - cfg.delta_true;
                    sum_err += err;
                    sum_err_sq += err * err;
                    sum_var += o.variance;
                    sum_var_sq += o.variance * o.variance;
                }
                None => failures += 1,
            }
        }
        if used == 0 {
            return Err(Error::Config(format!(
                "test {} failed in every replication",
                test.label()
            )));
        }
        if failures as f64 > 0.001 * cfg.reps as f64 {
            warnings.push(format!(
                "test {}: {} of {} replications failed and were excluded",
                test.label(),
                failures,
                cfg.reps
            ));
        }
        let used_f = used as f64;
        let p = rejections as f64 / used_f;
        let mean_err = sum_err / used_f;
        let var_err = (sum_err_sq / used_f - mean_err * mean_err).max(0.0);
        let mean_var = sum_var / used_f;
        let var_var = (sum_var_sq / used_f - mean_var * mean_var).max(0.0);
        summaries.push(McTestSummary {
            test: *test,
            reps_used: used,
            failures,
            rejection_rate: p,
            rejection_mc_se: (p * (1.0 - p) / used_f).sqrt(),
            bias: mean_err,
            bias_mc_se: (var_err / used_f).sqrt(),
            rmse: (sum_err_sq / used_f).sqrt(),
            var_mean: mean_var,
            var_sd: var_var.sqrt(),
            clamped,
        });
    }
    Ok(McResult {
        spec: cfg.spec,
        n_units: cfg.n_units,
        reps: cfg.reps,
        seed: cfg.seed,
        alpha: cfg.alpha,
        delta_null: cfg.delta_null,
        delta_true: cfg.delta_true,
        tests: summaries,
        warnings,
    })
}

/// One grid point of a power curve.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PowerPoint {
    pub mu1: f64,
    pub test: McTest,
    pub rejection_rate: f64,
    pub rejection_mc_se: f64,
}

/// Runs `run_mc` at every `mu1` in the grid, holding the null value and
/// the seed fixed, so tests and grid points share random numbers.
///
/// `delta_true` is shifted with `mu1`: the treated-arm intercept moves the
/// complier average effect one for one in every supported model.
pub fn power_curve(cfg: &McConfig, mu1_grid: &[f64]) -> Result<Vec<PowerPoint>> {
    if mu1_grid.is_empty() {
        return Err(Error::Config("power curve needs a nonempty grid".into()));
    }
    let mut points = Vec::with_capacity(mu1_grid.len() * cfg.tests.len());
    for &mu1 in mu1_grid {
        let shifted = McConfig {
            spec: cfg.spec.with_mu1(mu1),
            delta_true: cfg.delta_true + (mu1 - cfg.spec.mu1),
            tests: cfg.tests.clone(),
            ..*cfg
        };
        let result = run_mc(&shifted)?;
        for summary in result.tests {
            points.push(PowerPoint {
                mu1,
                test: summary.test,
                rejection_rate: summary.rejection_rate,
                rejection_mc_se: summary.rejection_mc_se,
            });
        }
    }
    Ok(points)
}
