//! Pre-rank projection functions.
//!
//! A pre-rank maps a prediction-observation pair to a scalar summary so
//! that multivariate calibration can be checked as univariate PIT
//! uniformity of the projected variable. The projections:
//!
//! | kind         | formula                                            |
//! |--------------|----------------------------------------------------|
//! | `marginal d` | `y_d` (1-based coordinate)                         |
//! | `location`   | `mean_d y_d`                                       |
//! | `scale`      | `mean_d (y_d - ybar)^2` (population variance)      |
//! | `dependency` | `-gamma_y(h) / s_y^2` (normalized variogram)       |
//! | `pca d`      | `y . V_d` for the d-th predictive principal axis   |
//! | `hdr`        | predictive density at `y`                          |
//! | `copula`     | smoothed joint CDF at `y`                          |
//!
//! with `gamma_y(h) = (1 / (2(D-h))) * sum_{d=1}^{D-h} |y_d - y_{d+h}|^2`
//! and `s_y^2` the population variance across the coordinates of `y`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Engine, Eval};
use crate::distributions::{
    log_density_in, smooth_orthant_cdf_in, Mixture, MixtureParams, PcaBasis, SampleSet,
};
use crate::error::{Error, Result};

/// A tagged choice of pre-rank function. Index parameters (`d`, `h`)
/// are 1-based, matching the usual subscript notation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PreRankSpec {
    Marginal { d: usize },
    Location,
    Scale,
    Dependency { h: usize },
    Pca { d: usize },
    Hdr,
    Copula,
}

impl PreRankSpec {
    /// Lowercase token used in CLI flags, config files, and reports.
    pub fn token(&self) -> &'static str {
        match self {
            PreRankSpec::Marginal { .. } => "marginal",
            PreRankSpec::Location => "location",
            PreRankSpec::Scale => "scale",
            PreRankSpec::Dependency { .. } => "dependency",
            PreRankSpec::Pca { .. } => "pca",
            PreRankSpec::Hdr => "hdr",
            PreRankSpec::Copula => "copula",
        }
    }

    /// Checks index parameters against the target dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            PreRankSpec::Marginal { d } | PreRankSpec::Pca { d } => {
                if d == 0 || d > dim {
                    return Err(Error::invalid(format!(
                        "{} index d={d} out of range [1, {dim}]",
                        self.token()
                    )));
                }
            }
            PreRankSpec::Dependency { h } => {
                if dim < 2 {
                    return Err(Error::invalid(
                        "dependency pre-rank requires D >= 2".to_string(),
                    ));
                }
                if h == 0 || h > dim - 1 {
                    return Err(Error::invalid(format!(
                        "dependency lag h={h} out of range [1, {}]",
                        dim - 1
                    )));
                }
            }
            PreRankSpec::Location | PreRankSpec::Scale | PreRankSpec::Hdr | PreRankSpec::Copula => {}
        }
        Ok(())
    }
}

/// Everything a projection may need besides the observation itself.
/// Which fields are required depends on the pre-rank: HDR needs the
/// mixture, copula needs mixture-derived samples plus a temperature,
/// and PCA needs a basis.
#[derive(Clone, Copy, Default)]
pub struct ProjectionContext<'a> {
    pub mixture: Option<&'a MixtureParams>,
    pub samples: Option<&'a SampleSet>,
    pub pca_basis: Option<&'a PcaBasis>,
    pub tau: Option<f64>,
}

impl<'a> ProjectionContext<'a> {
    pub fn with_mixture(mut self, mixture: &'a MixtureParams) -> Self {
        self.mixture = Some(mixture);
        self
    }

    pub fn with_samples(mut self, samples: &'a SampleSet) -> Self {
        self.samples = Some(samples);
        self
    }

    pub fn with_pca_basis(mut self, basis: &'a PcaBasis) -> Self {
        self.pca_basis = Some(basis);
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = Some(tau);
        self
    }
}

/// Projects one observation: `T = rho(x, y)`.
pub fn project(spec: PreRankSpec, ctx: &ProjectionContext, y: &[f64]) -> Result<f64> {
    spec.validate(y.len())?;
    match spec {
        PreRankSpec::Marginal { d } => Ok(y[d - 1]),
        PreRankSpec::Location => Ok(location_in(&mut Eval, y)),
        PreRankSpec::Scale => Ok(scale_in(&mut Eval, y)),
        PreRankSpec::Dependency { h } => Ok(dependency_in(&mut Eval, y, h)),
        PreRankSpec::Pca { d } => {
            let basis = ctx.pca_basis.ok_or(Error::MissingContext {
                prerank: "pca",
                field: "pca_basis",
            })?;
            if basis.dim() != y.len() {
                return Err(Error::DimensionMismatch {
                    expected: basis.dim(),
                    got: y.len(),
                });
            }
            Ok(basis.project(d, y))
        }
        PreRankSpec::Hdr => {
            let mixture = ctx.mixture.ok_or(Error::MissingContext {
                prerank: "hdr",
                field: "mixture",
            })?;
            mixture.density(y)
        }
        PreRankSpec::Copula => {
            let samples = ctx.samples.ok_or(Error::MissingContext {
                prerank: "copula",
                field: "samples",
            })?;
            let tau = ctx.tau.ok_or(Error::MissingContext {
                prerank: "copula",
                field: "tau",
            })?;
            crate::distributions::smooth_orthant_cdf(y, samples, tau)
        }
    }
}

/// Projects every sample in a set: `That_s = rho(x, yhat_s)`.
///
/// For the copula pre-rank, each sample's CDF value is estimated
/// against `ctx.samples` in full; when that set is the projected set
/// itself the estimate is self-inclusive (the smoothed self term
/// contributes `0.5^D / S`).
pub fn project_samples(
    spec: PreRankSpec,
    ctx: &ProjectionContext,
    samples: &SampleSet,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    spec.validate(samples.dim())?;
    match spec {
        PreRankSpec::Copula => {
            // Resolve context once; the reference cloud is shared by all
            // evaluations.
            let reference = ctx.samples.ok_or(Error::MissingContext {
                prerank: "copula",
                field: "samples",
            })?;
            let tau = ctx.tau.ok_or(Error::MissingContext {
                prerank: "copula",
                field: "tau",
            })?;
            if reference.dim() != samples.dim() {
                return Err(Error::DimensionMismatch {
                    expected: reference.dim(),
                    got: samples.dim(),
                });
            }
            let rows: Vec<&[f64]> = reference.rows().collect();
            Ok(samples
                .rows()
                .map(|y| smooth_orthant_cdf_in(&mut Eval, y, &rows, tau))
                .collect())
        }
        _ => samples.rows().map(|y| project(spec, ctx, y)).collect(),
    }
}

/// Smallest number of leading principal components whose cumulative
/// explained variance reaches `threshold`.
pub fn top_components(basis: &PcaBasis, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "explained-variance threshold must be in (0, 1], got {threshold}"
        )));
    }
    let mut cum = 0.0;
    for (i, r) in basis.explained_variance_ratio().iter().enumerate() {
        cum += r;
        if cum >= threshold - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(basis.dim())
}

// Generic projection bodies shared by the f64 path above and the
// training tape. PCA bases and index choices are constants either way.

pub(crate) fn location_in<E: Engine>(e: &mut E, y: &[E::Value]) -> E::Value {
    let total = e.sum(y);
    e.scale(total, 1.0 / y.len() as f64)
}

pub(crate) fn scale_in<E: Engine>(e: &mut E, y: &[E::Value]) -> E::Value {
    let mean = location_in(e, y);
    let sq: Vec<E::Value> = y
        .iter()
        .map(|&v| {
            let d = e.sub(v, mean);
            e.mul(d, d)
        })
        .collect();
    let total = e.sum(&sq);
    e.scale(total, 1.0 / y.len() as f64)
}

pub(crate) fn dependency_in<E: Engine>(e: &mut E, y: &[E::Value], h: usize) -> E::Value {
    let d = y.len();
    let variance = scale_in(e, y);
    // Constant vector: both the variogram and the variance vanish; a
    // constant output carries no dependency signal, so resolve 0/0 to 0.
    if e.value(variance) == 0.0 {
        return e.lit(0.0);
    }
    let diffs: Vec<E::Value> = (0..d - h)
        .map(|i| {
            let delta = e.sub(y[i], y[i + h]);
            e.mul(delta, delta)
        })
        .collect();
    let total = e.sum(&diffs);
    let gamma = e.scale(total, 1.0 / (2.0 * (d - h) as f64));
    let ratio = e.div(gamma, variance);
    e.neg(ratio)
}

pub(crate) fn pca_project_in<E: Engine>(e: &mut E, basis: &PcaBasis, d: usize, y: &[E::Value]) -> E::Value {
    e.weighted_sum(basis.component(d), y)
}

pub(crate) fn hdr_in<E: Engine>(e: &mut E, mix: &Mixture<E::Value>, y: &[E::Value]) -> E::Value {
    let ld = log_density_in(e, mix, y);
    e.exp(ld)
}
