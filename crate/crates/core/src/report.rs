//! Analysis reports: estimate plus requested variances, tests and their
//! JSON / aligned-text renderings.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{ObservedSample, PairStructure};
use crate::error::{Error, Result};
use crate::estimators::{
    adjusted_estimate, fit_linear_working_models, wald_estimate, ZetaSpec,
};
use crate::inference::{t_test, TestResult};
use crate::variance::{nu_hat_sq, nu_hat_sq_adj, omega_hat_sq, omega_pfe, HcCorrection};

pub const SCHEMA_VERSION: u32 = 1;

/// Variance estimator selection for the unadjusted estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMethod {
    Nu,
    Omega,
    OmegaPfeHc0,
    OmegaPfeHc1,
    NuAdj,
}

impl SeMethod {
    pub fn label(self) -> &'static str {
        match self {
            SeMethod::Nu => "nu",
            SeMethod::Omega => "omega",
            SeMethod::OmegaPfeHc0 => "omega_pfe_hc0",
            SeMethod::OmegaPfeHc1 => "omega_pfe_hc1",
            SeMethod::NuAdj => "nu_adj",
        }
    }

    /// CLI spelling (kebab-case); `all` is handled by the caller.
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "nu" => SeMethod::Nu,
            "omega" => SeMethod::Omega,
            "omega-pfe-hc0" => SeMethod::OmegaPfeHc0,
            "omega-pfe-hc1" => SeMethod::OmegaPfeHc1,
            "nu-adj" => SeMethod::NuAdj,
            _ => return None,
        })
    }

    pub const ALL_UNADJUSTED: [SeMethod; 4] = [
        SeMethod::Nu,
        SeMethod::Omega,
        SeMethod::OmegaPfeHc0,
        SeMethod::OmegaPfeHc1,
    ];
}

/// Covariate adjustment choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Adjust {
    None,
    Linear(ZetaSpec),
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub se_methods: Vec<SeMethod>,
    pub adjust: Adjust,
    pub delta_nulls: Vec<f64>,
    pub alpha: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            se_methods: SeMethod::ALL_UNADJUSTED.to_vec(),
            adjust: Adjust::None,
            delta_nulls: vec![0.0],
            alpha: 0.05,
        }
    }
}

/// One test row in a report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ReportTest {
    pub se_method: String,
    #[serde(flatten)]
    pub result: TestResult,
}

/// Point estimate with every requested variance, standard error, and test.
#[derive(Debug, Clone, Serialize)]
pub struct LateReport {
    pub estimator: String,
    pub delta_hat: f64,
    /// Estimated complier share (take-up gap between arms).
    pub first_stage: f64,
    /// Variances of sqrt(n) (delta_hat - delta), keyed by estimator name.
    pub variances: BTreeMap<String, f64>,
    /// sqrt(variance / n) per estimator name.
    pub std_errors: BTreeMap<String, f64>,
    pub tests: Vec<ReportTest>,
    pub n_pairs: usize,
}

impl LateReport {
    /// Invariants every assembled report satisfies; exercised in tests.
    pub fn check_invariants(&self) -> Result<()> {
        for (k, v) in &self.variances {
            if *v < 0.0 {
                return Err(Error::Config(format!("negative variance {k}: {v}")));
            }
        }
        for t in &self.tests {
            if !(0.0..=1.0).contains(&t.result.p_value) {
                return Err(Error::Config(format!(
                    "p-value out of range: {}",
                    t.result.p_value
                )));
            }
        }
        Ok(())
    }
}

/// Whole-analysis output: unadjusted estimate, optional adjusted estimate,
/// and provenance notes.
#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub schema_version: u32,
    pub n_pairs: usize,
    pub unadjusted: LateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjusted: Option<LateReport>,
    pub notes: Vec<String>,
}

/// Computes the unadjusted (and optionally adjusted) estimate with every
/// requested variance and test. The structure must put exactly one
/// treated unit in every pair.
pub fn analyze_sample(
    sample: &ObservedSample<f64>,
    structure: &PairStructure,
    opts: &AnalyzeOptions,
) -> Result<AnalyzeReport> {
    if structure.n_units() != sample.n_units() {
        return Err(Error::InvalidPairing(format!(
            "structure covers {} units, sample has {}",
            structure.n_units(),
            sample.n_units()
        )));
    }
    structure.check_one_treated_per_pair(sample.a())?;
    if opts.se_methods.is_empty() {
        return Err(Error::Config("no variance estimators requested".into()));
    }
    let mut notes = Vec::new();
    let n_pairs = sample.n_pairs();

    let wald = wald_estimate(sample)?;
    let mut variances = BTreeMap::new();
    for method in &opts.se_methods {
        let value = match method {
            SeMethod::Nu => {
                let (v, parts) = nu_hat_sq(sample, structure, wald.delta_hat)?;
                if parts.clamped {
                    notes.push("nu variance was tiny-negative and clamped to zero".into());
                }
                v
            }
            SeMethod::Omega => omega_hat_sq(sample)?,
            SeMethod::OmegaPfeHc0 => omega_pfe(sample, structure, HcCorrection::Hc0)?,
            SeMethod::OmegaPfeHc1 => omega_pfe(sample, structure, HcCorrection::Hc1)?,
            SeMethod::NuAdj => {
                return Err(Error::Config(
                    "nu-adj applies to the adjusted estimator; pass --adjust linear".into(),
                ))
            }
        };
        variances.insert(method.label().to_string(), value);
    }
    let unadjusted = assemble_report(
        "wald",
        wald.delta_hat,
        wald.cells.first_stage(),
        variances,
        n_pairs,
        &opts.delta_nulls,
        opts.alpha,
    )?;

    let adjusted = match &opts.adjust {
        Adjust::None => None,
        Adjust::Linear(zeta) => {
            let lin = fit_linear_working_models(sample, structure, zeta)?;
            if !lin.dropped_constant.is_empty() {
                notes.push(format!(
                    "constant zeta columns dropped: {}",
                    lin.dropped_constant.join(", ")
                ));
            }
            notes.push(format!("zeta columns: {}", lin.zeta_names.join(", ")));
            let adj = adjusted_estimate(sample, &lin.models)?;
            let (v, parts) =
                nu_hat_sq_adj(sample, structure, adj.delta_hat, &lin.models, adj.phi_adj)?;
            if parts.clamped {
                notes.push("nu_adj variance was tiny-negative and clamped to zero".into());
            }
            let mut variances = BTreeMap::new();
            variances.insert(SeMethod::NuAdj.label().to_string(), v);
            Some(assemble_report(
                "adjusted-linear",
                adj.delta_hat,
                adj.first_stage(),
                variances,
                n_pairs,
                &opts.delta_nulls,
                opts.alpha,
            )?)
        }
    };

    Ok(AnalyzeReport {
        schema_version: SCHEMA_VERSION,
        n_pairs,
        unadjusted,
        adjusted,
        notes,
    })
}

fn assemble_report(
    estimator: &str,
    delta_hat: f64,
    first_stage: f64,
    variances: BTreeMap<String, f64>,
    n_pairs: usize,
    delta_nulls: &[f64],
    alpha: f64,
) -> Result<LateReport> {
    let mut std_errors = BTreeMap::new();
    for (k, v) in &variances {
        std_errors.insert(k.clone(), (v / n_pairs as f64).sqrt());
    }
    let mut tests = Vec::new();
    for &null in delta_nulls {
        for (k, v) in &variances {
            tests.push(ReportTest {
                se_method: k.clone(),
                result: t_test(delta_hat, *v, n_pairs, null, alpha)?,
            });
        }
    }
    let report = LateReport {
        estimator: estimator.to_string(),
        delta_hat,
        first_stage,
        variances,
        std_errors,
        tests,
        n_pairs,
    };
    report.check_invariants()?;
    Ok(report)
}

fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

/// Aligned-text rendering: an estimate row, then one standard-error row
/// per variance estimator with significance stars at the 10/5/1 percent
/// levels against the first null value.
pub fn render_text(report: &AnalyzeReport) -> String {
    let mut out = String::new();
    let mut block = |late: &LateReport| {
        out.push_str(&format!(
            "{:<22} {:>14.6}\n",
            format!("delta_hat [{}]", late.estimator),
            late.delta_hat
        ));
        out.push_str(&format!("{:<22} {:>14.6}\n", "first_stage", late.first_stage));
        for (name, se) in &late.std_errors {
            let star = late
                .tests
                .iter()
                .find(|t| &t.se_method == name)
                .map(|t| stars(t.result.p_value))
                .unwrap_or("");
            out.push_str(&format!(
                "{:<22} {:>14}\n",
                format!("  se [{name}]"),
                format!("({se:.6}){star}")
            ));
        }
    };
    block(&report.unadjusted);
    if let Some(adj) = &report.adjusted {
        block(adj);
    }
    out.push_str(&format!("{:<22} {:>14}\n", "n_pairs", report.n_pairs));
    for note in &report.notes {
        out.push_str(&format!("note: {note}\n"));
    }
    out
}
