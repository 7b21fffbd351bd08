//! The simulation data-generating processes and the numerical oracle for
//! the complier average effect they imply.
//!
//! Two families are supported. The no-covariates family draws a scalar
//! matching covariate `X ~ U[0,1]` with take-up thresholds
//! `D(0) = 1{0.2 X > e3}` and, for non-takers, `D(1) = 1{0.5 + 0.2 X > e4}`.
//! The with-covariates family adds an adjustment covariate `W` correlated
//! with `X` through a bivariate normal, take-up thresholds
//! `0.2 X + 0.2 W X` (control) and `0.75 + 0.2 X + 0.2 W X` (treated), and
//! model-specific outcome means. Potential outcomes are
//! `Y(d) = mu_d + m_d + sigma_d * eps_d` with `mu_0 = 0`.
//!
//! Per-unit draw order (one stream consumed left to right):
//! no-covariates `x, e0, e1, e3, e4`; with-covariates
//! `v1, z2, e0, e1, e3, e4` where `v2 = rho v1 + sqrt(1 - rho^2) z2`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::ObservedSample;
use crate::error::{Error, Result};
use crate::normal::normal_cdf;
use crate::rng::{standard_normal, stream_rng, uniform};
use crate::scalar::{real, Scalar};

/// Simulation family: whether adjustment covariates exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    NoCovariates,
    WithCovariates,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::NoCovariates => "s51",
            Family::WithCovariates => "s52",
        }
    }
}

/// Full parameterization of one simulation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DgpSpec {
    pub family: Family,
    pub model_id: u8,
    /// Treated-arm intercept; the control intercept is 0.
    pub mu1: f64,
    /// Outcome slope for with-covariates models 1-2.
    pub gamma: f64,
    /// Correlation of the latent normals behind (x, w).
    pub rho: f64,
    /// Outcome coefficients for with-covariates models 3-4.
    pub gamma123: [f64; 3],
}

impl DgpSpec {
    /// No-covariates family, models 1-3.
    pub fn no_covariates(model_id: u8, mu1: f64) -> Result<Self> {
        let spec = DgpSpec {
            family: Family::NoCovariates,
            model_id,
            mu1,
            gamma: 0.0,
            rho: 0.0,
            gamma123: [0.0; 3],
        };
        spec.validated()
    }

    /// With-covariates family, models 1-4, at the published parameter
    /// values `gamma = 4`, `rho = 0.2`, `(gamma1, gamma2, gamma3) = (2, 1, 2)`.
    pub fn with_covariates(model_id: u8, mu1: f64) -> Result<Self> {
        let spec = DgpSpec {
            family: Family::WithCovariates,
            model_id,
            mu1,
            gamma: 4.0,
            rho: 0.2,
            gamma123: [2.0, 1.0, 2.0],
        };
        spec.validated()
    }

    pub fn with_mu1(mut self, mu1: f64) -> Self {
        self.mu1 = mu1;
        self
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    /// Re-checks the spec invariants; useful after struct-update edits.
    pub fn validate(&self) -> Result<()> {
        let max_model = match self.family {
            Family::NoCovariates => 3,
            Family::WithCovariates => 4,
        };
        if self.model_id < 1 || self.model_id > max_model {
            return Err(Error::Config(format!(
                "model {} is not defined for family {}",
                self.model_id,
                self.family.label()
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Config(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if !self.mu1.is_finite() || !self.gamma.is_finite() || self.gamma123.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("spec parameters must be finite".into()));
        }
        Ok(())
    }

    /// Number of adjustment covariate columns the family produces.
    pub fn k_w(&self) -> usize {
        match self.family {
            Family::NoCovariates => 0,
            Family::WithCovariates => 1,
        }
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.family.label(), self.model_id)
    }
}

struct UnitDraw {
    x: f64,
    w: Option<f64>,
    y1: f64,
    y0: f64,
    d1: bool,
    d0: bool,
}

fn draw_unit(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> UnitDraw {
    match spec.family {
        Family::NoCovariates => {
            let x = uniform(rng);
            let e0 = standard_normal(rng);
            let e1 = standard_normal(rng);
            let e3 = uniform(rng);
            let e4 = uniform(rng);
            let d0 = 0.2 * x > e3;
            let d1 = d0 || 0.5 + 0.2 * x > e4;
            let (m0, m1, s0, s1) = match spec.model_id {
                1 => (x - 0.5, x - 0.5, 1.0, 1.0),
                2 => (0.0, 10.0 * (x * x - 1.0 / 3.0), 1.0, 1.0),
                _ => (0.0, 10.0 * (x * x - 1.0 / 3.0), x * x, x * x),
            };
            UnitDraw {
                x,
                w: None,
                y0: m0 + s0 * e0,
                y1: spec.mu1 + m1 + s1 * e1,
                d0,
                d1,
            }
        }
        Family::WithCovariates => {
            let v1 = standard_normal(rng);
            let z2 = standard_normal(rng);
            let v2 = spec.rho * v1 + (1.0 - spec.rho * spec.rho).sqrt() * z2;
            let e0 = standard_normal(rng);
            let e1 = standard_normal(rng);
            let e3 = uniform(rng);
            let e4 = uniform(rng);
            let (x, w) = match spec.model_id {
                1 | 2 => (normal_cdf(v1), normal_cdf(v2)),
                _ => (v1, v1 * v2),
            };
            let threshold = 0.2 * x + 0.2 * w * x;
            let d0 = threshold > e3;
            let d1 = d0 || 0.75 + threshold > e4;
            let [g1, g2, g3] = spec.gamma123;
            let m0 = match spec.model_id {
                1 => spec.gamma * (w - 0.5),
                2 => (spec.gamma * (w - 0.5)).exp(),
                _ => g1 * (w - spec.rho) + g2 * (normal_cdf(w) - 0.5) + g3 * (x * x - 1.0),
            };
            let m1 = if spec.model_id == 4 {
                m0 + (normal_cdf(x) - 0.5)
            } else {
                m0
            };
            UnitDraw {
                x,
                w: Some(w),
                y0: m0 + e0,
                y1: spec.mu1 + m1 + e1,
                d0,
                d1,
            }
        }
    }
}

/// Potential outcomes and take-up decisions for `2n` units, before any
/// treatment has been assigned.
#[derive(Debug, Clone)]
pub struct PotentialData<F: Scalar = f64> {
    y1: DVector<F>,
    y0: DVector<F>,
    d1: Vec<u8>,
    d0: Vec<u8>,
    x: DMatrix<F>,
    w: DMatrix<F>,
}

impl<F: Scalar> PotentialData<F> {
    pub fn n_units(&self) -> usize {
        self.y1.len()
    }

    pub fn x(&self) -> &DMatrix<F> {
        &self.x
    }

    pub fn w(&self) -> &DMatrix<F> {
        &self.w
    }

    pub fn d(&self, a: u8, i: usize) -> u8 {
        if a == 1 {
            self.d1[i]
        } else {
            self.d0[i]
        }
    }

    /// Complier indicator `D(1) = 1, D(0) = 0`.
    pub fn complier(&self, i: usize) -> bool {
        self.d1[i] == 1 && self.d0[i] == 0
    }

    /// Intention-to-treat potential outcome
    /// `Y(1) D(a) + Y(0) (1 - D(a))`.
    pub fn tilde_y(&self, a: u8, i: usize) -> F {
        if self.d(a, i) == 1 {
            self.y1[i]
        } else {
            self.y0[i]
        }
    }

    /// Treatment-effect contrast `Y(1) - Y(0)` for unit `i`.
    pub fn effect(&self, i: usize) -> F {
        self.y1[i] - self.y0[i]
    }

    /// Applies an assignment vector through the observation equations
    /// `D_i = D_i(1) A_i + D_i(0)(1 - A_i)` and
    /// `Y_i = Y_i(1) D_i + Y_i(0)(1 - D_i)`.
    pub fn observe(&self, a: &[u8]) -> Result<ObservedSample<F>> {
        if a.len() != self.n_units() {
            return Err(Error::Config(format!(
                "assignment covers {} units, potential data has {}",
                a.len(),
                self.n_units()
            )));
        }
        let n = self.n_units();
        let d: Vec<u8> = (0..n).map(|i| self.d(a[i], i)).collect();
        let y = DVector::from_fn(n, |i, _| if d[i] == 1 { self.y1[i] } else { self.y0[i] });
        ObservedSample::new(y, d, a.to_vec(), self.x.clone(), self.w.clone())
    }
}

pub(crate) fn generate_with_rng<F: Scalar>(
    spec: &DgpSpec,
    n_units: usize,
    rng: &mut ChaCha8Rng,
) -> PotentialData<F> {
    let k_w = spec.k_w();
    let mut y1 = DVector::zeros(n_units);
    let mut y0 = DVector::zeros(n_units);
    let mut d1 = Vec::with_capacity(n_units);
    let mut d0 = Vec::with_capacity(n_units);
    let mut x = DMatrix::zeros(n_units, 1);
    let mut w = DMatrix::zeros(n_units, k_w);
    for i in 0..n_units {
        let unit = draw_unit(spec, rng);
        debug_assert!(unit.d1 >= unit.d0, "monotone take-up by construction");
        y1[i] = real(unit.y1);
        y0[i] = real(unit.y0);
        d1.push(unit.d1 as u8);
        d0.push(unit.d0 as u8);
        x[(i, 0)] = real(unit.x);
        if let Some(wv) = unit.w {
            w[(i, 0)] = real(wv);
        }
    }
    PotentialData {
        y1,
        y0,
        d1,
        d0,
        x,
        w,
    }
}

/// Draws `n_units` units from the model equations; stream 0 of `seed`.
pub fn generate<F: Scalar>(
    spec: &DgpSpec,
    n_units: usize,
    seed: u64,
) -> Result<PotentialData<F>> {
    if n_units < 2 || n_units % 2 != 0 {
        return Err(Error::Config(format!(
            "n_units must be even and >= 2, got {n_units}"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    Ok(generate_with_rng(spec, n_units, &mut rng))
}

/// Monte Carlo estimate of the complier average effect at the spec's
/// `mu1`, with its own Monte Carlo standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Delta0Estimate {
    pub value: f64,
    pub mc_se: f64,
    pub n_draws: u64,
    pub n_compliers: u64,
    pub seed: u64,
}

/// Stream ids used by the oracle start here so they never collide with
/// the per-replication streams of the Monte Carlo engine.
const ORACLE_STREAM_BASE: u64 = 1 << 32;

const ORACLE_CHUNK: u64 = 1 << 16;

/// Mean of `Y(1) - Y(0)` over compliers in `n_draws` fresh unit draws.
///
/// Deterministic in `seed` and independent of worker count: draws are
/// partitioned into fixed chunks, each on its own stream, and reduced in
/// chunk order. Footnote-level accuracy needs about 1e7 draws.
pub fn delta0_oracle(spec: &DgpSpec, n_draws: u64, seed: u64) -> Result<Delta0Estimate> {
    if n_draws == 0 {
        return Err(Error::Config("delta0 oracle needs at least one draw".into()));
    }
    let n_chunks = n_draws.div_ceil(ORACLE_CHUNK);
    let stats: Vec<(u64, f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream_rng(seed, ORACLE_STREAM_BASE + chunk);
            let in_chunk = ORACLE_CHUNK.min(n_draws - chunk * ORACLE_CHUNK);
            let (mut count, mut sum, mut sum_sq) = (0u64, 0.0f64, 0.0f64);
            for _ in 0..in_chunk {
                let unit = draw_unit(spec, &mut rng);
                if unit.d1 && !unit.d0 {
                    let effect = unit.y1 - unit.y0;
                    count += 1;
                    sum += effect;
                    sum_sq += effect * effect;
                }
            }
            (count, sum, sum_sq)
        })
        .collect();

    let (mut compliers, mut sum, mut sum_sq) = (0u64, 0.0, 0.0);
    for (c, s, s2) in stats {
        compliers += c;
        sum += s;
        sum_sq += s2;
    }
    if compliers == 0 {
        return Err(Error::Config(
            "no compliers generated; the take-up process is degenerate".into(),
        ));
    }
    let mean = sum / compliers as f64;
    let var = (sum_sq / compliers as f64 - mean * mean).max(0.0);
    Ok(Delta0Estimate {
        value: mean,
        mc_se: (var / compliers as f64).sqrt(),
        n_draws,
        n_compliers: compliers,
        seed,
    })
}
