//! Projected probability integral transforms.
//!
//! For a test point `(x, y)` and a pre-rank `rho`, the projected PIT is
//! the estimated conditional CDF of the projection evaluated at the
//! observed projection: draw predictive samples, project both them and
//! the observation, and read off where the observation lands.
//!
//! Two estimator modes exist. The smoothed mode replaces the indicator
//! with a sigmoid of temperature `tau` so gradients can flow during
//! training. The hard mode counts, and is used for evaluation; its
//! values lie exactly on the grid `{0, 1/S, ..., 1}`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Engine, Eval};
use crate::distributions::{pca_of_samples, MixturePredictor};
use crate::error::{Error, Result};
use crate::preranks::{project, project_samples, PreRankSpec, ProjectionContext};
use crate::seeds;

/// How the empirical conditional CDF treats the indicator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PitMode {
    /// Sigmoid-smoothed indicator with temperature `tau`; differentiable.
    Smooth { tau: f64 },
    /// Exact counting with ties covered (`<=`).
    Hard,
}

/// Projected PIT values for a dataset slice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PitBatch {
    pub pit_values: Vec<f64>,
    pub mode: PitMode,
    pub prerank: PreRankSpec,
    pub sample_count: usize,
}

impl PitBatch {
    pub fn len(&self) -> usize {
        self.pit_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pit_values.is_empty()
    }
}

/// Smoothed empirical CDF of `values` at `t`:
/// `(1/S) sum_s sigmoid(tau * (t - values_s))`.
pub fn smooth_ecdf(values: &[f64], t: f64, tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature tau must be positive"));
    }
    Ok(smooth_ecdf_in(&mut Eval, values, t, tau))
}

/// Generic body of [`smooth_ecdf`], usable on the autodiff tape.
pub fn smooth_ecdf_in<E: Engine>(e: &mut E, values: &[E::Value], t: E::Value, tau: f64) -> E::Value {
    let terms: Vec<E::Value> = values
        .iter()
        .map(|&v| {
            let diff = e.sub(t, v);
            let scaled = e.scale(diff, tau);
            e.sigmoid(scaled)
        })
        .collect();
    let total = e.sum(&terms);
    e.scale(total, 1.0 / values.len() as f64)
}

/// Hard empirical CDF: the fraction of `values` at or below `t`.
pub fn hard_ecdf(values: &[f64], t: f64) -> f64 {
    let covered = values.iter().filter(|&&v| v <= t).count();
    covered as f64 / values.len() as f64
}

/// Projected PIT of one observation against the sample set carried in
/// `ctx` (which also serves as the copula reference cloud and the PCA
/// basis source if those pre-ranks ask for them).
pub fn projected_pit(
    spec: PreRankSpec,
    ctx: &ProjectionContext,
    y: &[f64],
    mode: PitMode,
) -> Result<f64> {
    let samples = ctx.samples.ok_or(Error::MissingContext {
        prerank: spec.token(),
        field: "samples",
    })?;
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let t = project(spec, ctx, y)?;
    let that = project_samples(spec, ctx, samples)?;
    Ok(match mode {
        PitMode::Hard => hard_ecdf(&that, t),
        PitMode::Smooth { tau } => smooth_ecdf(&that, t, tau)?,
    })
}

/// Settings for [`pit_batch`].
#[derive(Clone, Copy, Debug)]
pub struct PitBatchConfig {
    /// Predictive samples per row (both for the projection set and for
    /// the independent reference cloud).
    pub sample_count: usize,
    /// Temperature for smoothed CDFs (copula projection and smooth mode).
    pub tau: f64,
    pub mode: PitMode,
    pub seed: u64,
}

impl Default for PitBatchConfig {
    fn default() -> Self {
        PitBatchConfig {
            sample_count: 100,
            tau: 100.0,
            mode: PitMode::Hard,
            seed: 0,
        }
    }
}

/// Projected PITs for a dataset slice under one pre-rank.
///
/// Each row draws its own sample sets from a seed split on the row
/// index, so results do not depend on evaluation order and rows can be
/// processed in parallel. Two independent sets are drawn per row: a
/// reference cloud that defines sample-dependent projections (the
/// copula CDF estimate and the PCA basis), and a projection set that
/// supplies the comparison values. Keeping them independent makes the
/// projection a fixed function of each compared point, so under a
/// perfectly calibrated predictor the hard PIT is exactly uniform on
/// its `S + 1`-point grid for every pre-rank.
pub fn pit_batch<P: MixturePredictor + Sync>(
    spec: PreRankSpec,
    predictor: &P,
    xs: &[&[f64]],
    ys: &[&[f64]],
    cfg: &PitBatchConfig,
) -> Result<PitBatch> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if cfg.sample_count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let pit_values: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let params = predictor.predict(xs[i]);
            let reference = params.sample(seeds::split2(cfg.seed, i as u64, 0), cfg.sample_count)?;
            let projection = params.sample(seeds::split2(cfg.seed, i as u64, 1), cfg.sample_count)?;
            let basis = match spec {
                PreRankSpec::Pca { .. } => Some(pca_of_samples(&reference)?),
                _ => None,
            };
            let mut ctx = ProjectionContext::default()
                .with_mixture(&params)
                .with_samples(&reference)
                .with_tau(cfg.tau);
            if let Some(b) = &basis {
                ctx = ctx.with_pca_basis(b);
            }
            let t = project(spec, &ctx, ys[i])?;
            let that = project_samples(spec, &ctx, &projection)?;
            Ok(match cfg.mode {
                PitMode::Hard => hard_ecdf(&that, t),
                PitMode::Smooth { tau } => smooth_ecdf(&that, t, tau)?,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PitBatch {
        pit_values,
        mode: cfg.mode,
        prerank: spec,
        sample_count: cfg.sample_count,
    })
}
