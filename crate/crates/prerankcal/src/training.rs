//! Training: the regularized objective, exact reverse-mode gradients,
//! the Adam loop with early stopping, and regularization-strength
//! selection under an energy-score budget.
//!
//! The objective for a batch is
//!
//! ```text
//! L = (1/N) sum_i S(F(x_i), y_i)  +  lambda * R
//! ```
//!
//! where `R` composes PCE-KDE penalties over projected smooth PITs:
//! plain (one pre-rank), marginal+pre-rank (marginal family average
//! plus the main term), or PCA+pre-rank (top-`d*` principal projections
//! plus the main term).
//!
//! Gradients are computed in three stages so rows can run in parallel
//! deterministically: per-row graphs produce each row's score and
//! smooth PITs; a small aggregation graph combines them into the loss;
//! its cotangents seed the per-row backward sweeps, whose parameter
//! gradients are reduced in fixed chunk order (independent of thread
//! count).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Engine, Eval, Tape, Var};
use crate::data::Dataset;
use crate::distributions::{
    draw_reparam_noise, log_density_in, pca_of_samples, reparam_samples_in,
    smooth_orthant_cdf_in, Mixture, SampleSet,
};
use crate::error::{Error, Result};
use crate::metrics::{pce, pce_kde_in, QuantileGrid};
use crate::model::{forward_in, init_weights, MixtureNetwork, ModelWeights, NetworkConfig};
use crate::pit::{pit_batch, smooth_ecdf_in, PitBatchConfig, PitMode};
use crate::preranks::{
    dependency_in, hdr_in, location_in, pca_project_in, scale_in, top_components, PreRankSpec,
};
use crate::scoring::{energy_score, energy_score_in};
use crate::seeds;

/// Rows processed per parallel work unit. Fixed so that gradient
/// reduction order, and therefore every result, is independent of the
/// number of worker threads.
const GRAD_CHUNK: usize = 32;

// Seed-space tags keeping independent random streams apart.
const TAG_EPOCH_SHUFFLE: u64 = 0x01;
const TAG_STEP: u64 = 0x02;
const TAG_FIXED_NOISE: u64 = 0x03;
const TAG_VAL: u64 = 0x04;

/// Proper scoring rule minimized by training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Nll,
    Energy,
}

/// Main pre-rank selection: a single pre-rank, or one of the averaged
/// families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreRankSel {
    One(PreRankSpec),
    /// `(1/D) sum_d R(marginal_d)`.
    MarginalMean,
    /// `(1/d*) sum_d R(pca_d)` over the top `d*` components.
    PcaMean,
}

impl PreRankSel {
    pub fn group_name(&self) -> String {
        match self {
            PreRankSel::One(spec) => spec.token().to_string(),
            PreRankSel::MarginalMean => "marginal".to_string(),
            PreRankSel::PcaMean => "pca".to_string(),
        }
    }
}

/// How the regularizer composes terms around the main pre-rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Plain,
    MarginalPlus,
    PcaPlus,
}

/// Calibration-regularizer settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub lambda: f64,
    pub prerank: PreRankSel,
    pub composition: Composition,
    /// Predictive samples per row per step.
    pub sample_count: usize,
    /// Sigmoid temperature shared by the smooth CDFs.
    pub tau: f64,
    /// Quantile grid size M.
    pub grid_size: usize,
    /// Penalty exponent p >= 1.
    pub exponent: f64,
    /// Explained-variance threshold selecting `d*` for the PCA family.
    pub pca_threshold: f64,
    /// Reuse one noise draw per row across steps instead of resampling.
    pub fixed_noise: bool,
    /// Dependency lag used when the main pre-rank is `dependency`.
    pub dependency_lag: usize,
}

impl RegularizerConfig {
    pub fn new(lambda: f64, prerank: PreRankSel) -> Self {
        RegularizerConfig {
            lambda,
            prerank,
            composition: Composition::Plain,
            sample_count: 100,
            tau: 100.0,
            grid_size: 100,
            exponent: 1.0,
            pca_threshold: 0.8,
            fixed_noise: false,
            dependency_lag: 1,
        }
    }

    pub fn with_composition(mut self, composition: Composition) -> Self {
        self.composition = composition;
        self
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if self.sample_count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.grid_size == 0 {
            return Err(Error::invalid("grid size must be at least 1"));
        }
        if !(self.exponent >= 1.0) {
            return Err(Error::invalid("exponent p must be at least 1"));
        }
        if !(self.pca_threshold > 0.0 && self.pca_threshold <= 1.0) {
            return Err(Error::invalid("pca threshold must be in (0, 1]"));
        }
        if let PreRankSel::One(spec) = self.prerank {
            spec.validate(dim)?;
        }
        match (self.composition, self.prerank) {
            (Composition::MarginalPlus, PreRankSel::MarginalMean) => {
                return Err(Error::invalid(
                    "marginal composition with a marginal main pre-rank is redundant",
                ));
            }
            (Composition::PcaPlus, PreRankSel::PcaMean) => {
                return Err(Error::invalid(
                    "pca composition with a pca main pre-rank is redundant",
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

/// One weighted PCE-KDE term of the composed regularizer.
#[derive(Clone, Debug)]
pub(crate) struct RegTerm {
    pub weight: f64,
    pub spec: PreRankSpec,
}

/// Expands the composition into concrete weighted terms. `d_star` is
/// only consulted for PCA families.
pub(crate) fn expand_terms(
    reg: &RegularizerConfig,
    dim: usize,
    d_star: usize,
) -> Result<Vec<RegTerm>> {
    let mut terms = Vec::new();
    let push_family = |family: PreRankSel, terms: &mut Vec<RegTerm>| match family {
        PreRankSel::MarginalMean => {
            for d in 1..=dim {
                terms.push(RegTerm {
                    weight: 1.0 / dim as f64,
                    spec: PreRankSpec::Marginal { d },
                });
            }
        }
        PreRankSel::PcaMean => {
            for d in 1..=d_star {
                terms.push(RegTerm {
                    weight: 1.0 / d_star as f64,
                    spec: PreRankSpec::Pca { d },
                });
            }
        }
        PreRankSel::One(spec) => terms.push(RegTerm { weight: 1.0, spec }),
    };
    match reg.composition {
        Composition::Plain => {}
        Composition::MarginalPlus => push_family(PreRankSel::MarginalMean, &mut terms),
        Composition::PcaPlus => push_family(PreRankSel::PcaMean, &mut terms),
    }
    push_family(reg.prerank, &mut terms);
    for t in &terms {
        t.spec.validate(dim)?;
    }
    Ok(terms)
}

/// Exact reverse-mode gradient of a scalar function built from tape
/// operations. Returns the value and the gradient at `theta`.
pub fn grad<F>(f: F, theta: &[f64]) -> (f64, Vec<f64>)
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars = tape.input_block(theta);
    let out = f(&mut tape, &vars);
    let value = tape.value(out);
    let gradient = tape.backward(out).collect(&vars);
    (value, gradient)
}

/// Per-row outputs that cross between the row graphs and the
/// aggregation graph.
struct RowOut<V> {
    score: V,
    pits: Vec<V>,
}

/// Builds one row's graph: forward pass, shared sample draw, score, and
/// one smooth PIT per regularizer term.
fn row_graph<E: Engine>(
    e: &mut E,
    net: &NetworkConfig,
    theta: &[E::Value],
    x: &[f64],
    y: &[f64],
    terms: &[RegTerm],
    score: ScoreKind,
    reg: &RegularizerConfig,
    row_seed: u64,
) -> RowOut<E::Value> {
    let xv: Vec<E::Value> = x.iter().map(|&v| e.lit(v)).collect();
    let yv: Vec<E::Value> = y.iter().map(|&v| e.lit(v)).collect();
    let mix = forward_in(e, net, theta, &xv);

    let needs_samples = !terms.is_empty() || score == ScoreKind::Energy;
    let samples: Vec<Vec<E::Value>> = if needs_samples {
        let (comps, noise) = draw_reparam_noise(e, &mix, row_seed, reg.sample_count);
        reparam_samples_in(e, &mix, &comps, &noise)
    } else {
        Vec::new()
    };

    let score_node = match score {
        ScoreKind::Nll => {
            let ld = log_density_in(e, &mix, &yv);
            e.neg(ld)
        }
        ScoreKind::Energy => energy_score_in(e, &samples, &yv),
    };

    let mut pits = Vec::with_capacity(terms.len());
    for term in terms {
        let (t, that) = project_term(e, term.spec, &mix, &samples, &yv, reg.tau);
        pits.push(smooth_ecdf_in(e, &that, t, reg.tau));
    }
    RowOut {
        score: score_node,
        pits,
    }
}

/// Projects the observation and every shared sample under one pre-rank,
/// on the engine. The PCA basis is fitted to the current sample values
/// and enters as constants (no gradient through eigenvectors); the
/// copula reference cloud is the shared sample set itself, making the
/// sample projections self-inclusive.
fn project_term<E: Engine>(
    e: &mut E,
    spec: PreRankSpec,
    mix: &Mixture<E::Value>,
    samples: &[Vec<E::Value>],
    y: &[E::Value],
    tau: f64,
) -> (E::Value, Vec<E::Value>) {
    match spec {
        PreRankSpec::Marginal { d } => (
            y[d - 1],
            samples.iter().map(|s| s[d - 1]).collect(),
        ),
        PreRankSpec::Location => (
            location_in(e, y),
            samples.iter().map(|s| location_in(e, s)).collect(),
        ),
        PreRankSpec::Scale => (
            scale_in(e, y),
            samples.iter().map(|s| scale_in(e, s)).collect(),
        ),
        PreRankSpec::Dependency { h } => (
            dependency_in(e, y, h),
            samples.iter().map(|s| dependency_in(e, s, h)).collect(),
        ),
        PreRankSpec::Pca { d } => {
            let basis = sample_values_basis(e, samples);
            (
                pca_project_in(e, &basis, d, y),
                samples
                    .iter()
                    .map(|s| pca_project_in(e, &basis, d, s))
                    .collect(),
            )
        }
        PreRankSpec::Hdr => (
            hdr_in(e, mix, y),
            samples.iter().map(|s| hdr_in(e, mix, s)).collect(),
        ),
        PreRankSpec::Copula => {
            let refs: Vec<&[E::Value]> = samples.iter().map(|s| s.as_slice()).collect();
            (
                smooth_orthant_cdf_in(e, y, &refs, tau),
                samples
                    .iter()
                    .map(|s| smooth_orthant_cdf_in(e, s, &refs, tau))
                    .collect(),
            )
        }
    }
}

fn sample_values_basis<E: Engine>(
    e: &E,
    samples: &[Vec<E::Value>],
) -> crate::distributions::PcaBasis {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.iter().map(|&v| e.value(v)).collect())
        .collect();
    let set = SampleSet::from_rows(&rows, 0, vec![0; rows.len()]).expect("nonempty samples");
    pca_of_samples(&set).expect("at least two samples")
}

/// Aggregates row outputs into the training loss on the engine:
/// mean score plus `lambda` times the composed PCE-KDE penalty.
fn aggregate_loss<E: Engine>(
    e: &mut E,
    scores: &[E::Value],
    term_pits: &[Vec<E::Value>],
    terms: &[RegTerm],
    reg: &RegularizerConfig,
    grid: &QuantileGrid,
) -> E::Value {
    let total = e.sum(scores);
    let mut loss = e.scale(total, 1.0 / scores.len() as f64);
    if reg.lambda > 0.0 && !terms.is_empty() {
        let mut penalty: Option<E::Value> = None;
        for (term, pits) in terms.iter().zip(term_pits) {
            let r = pce_kde_in(e, pits, grid, reg.tau, reg.exponent);
            let w = e.scale(r, term.weight);
            penalty = Some(match penalty {
                None => w,
                Some(p) => e.add(p, w),
            });
        }
        let scaled = e.scale(penalty.expect("nonempty terms"), reg.lambda);
        loss = e.add(loss, scaled);
    }
    loss
}

/// Per-row sample seed for a training step.
fn row_noise_seed(reg: &RegularizerConfig, base: u64, step: u64, row_index: u64) -> u64 {
    if reg.fixed_noise {
        seeds::split2(base, TAG_FIXED_NOISE, row_index)
    } else {
        seeds::split2(seeds::split2(base, TAG_STEP, step), 0, row_index)
    }
}

/// Number of leading principal components to regularize, from PCA on
/// the predictive samples of the whole batch pooled together.
fn batch_d_star(
    net: &NetworkConfig,
    theta: &[f64],
    xs: &[&[f64]],
    reg: &RegularizerConfig,
    seed: u64,
    step: u64,
) -> Result<usize> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(xs.len() * reg.sample_count);
    let mut e = Eval;
    for (i, x) in xs.iter().enumerate() {
        let xv: Vec<f64> = x.to_vec();
        let mix = forward_in(&mut e, net, theta, &xv);
        let row_seed = row_noise_seed(reg, seed, step, i as u64);
        let (comps, noise) = draw_reparam_noise(&e, &mix, row_seed, reg.sample_count);
        rows.extend(reparam_samples_in(&mut e, &mix, &comps, &noise));
    }
    let pooled = SampleSet::from_rows(&rows, 0, vec![0; rows.len()])?;
    let basis = pca_of_samples(&pooled)?;
    top_components(&basis, reg.pca_threshold)
}

fn needs_d_star(reg: &RegularizerConfig) -> bool {
    reg.composition == Composition::PcaPlus || reg.prerank == PreRankSel::PcaMean
}

fn resolve_terms(
    net: &NetworkConfig,
    theta: &[f64],
    xs: &[&[f64]],
    reg: &RegularizerConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<RegTerm>> {
    if reg.lambda == 0.0 {
        return Ok(Vec::new());
    }
    let d_star = if needs_d_star(reg) {
        batch_d_star(net, theta, xs, reg, seed, step)?
    } else {
        0
    };
    expand_terms(reg, net.output_dim, d_star)
}

/// The training objective for one batch, on plain floats. Fresh
/// reparametrization noise is drawn from `(seed, step, row)`, so the
/// value is deterministic given its arguments.
pub fn objective(
    net: &NetworkConfig,
    theta: &[f64],
    xs: &[&[f64]],
    ys: &[&[f64]],
    reg: &RegularizerConfig,
    score: ScoreKind,
    seed: u64,
) -> Result<f64> {
    objective_at_step(net, theta, xs, ys, reg, score, seed, 0)
}

fn objective_at_step(
    net: &NetworkConfig,
    theta: &[f64],
    xs: &[&[f64]],
    ys: &[&[f64]],
    reg: &RegularizerConfig,
    score: ScoreKind,
    seed: u64,
    step: u64,
) -> Result<f64> {
    check_batch(net, theta, xs, ys, reg)?;
    let terms = resolve_terms(net, theta, xs, reg, seed, step)?;
    let grid = QuantileGrid::new(reg.grid_size)?;
    let mut e = Eval;
    let mut scores = Vec::with_capacity(xs.len());
    let mut term_pits: Vec<Vec<f64>> = vec![Vec::with_capacity(xs.len()); terms.len()];
    for i in 0..xs.len() {
        let row_seed = row_noise_seed(reg, seed, step, i as u64);
        let out = row_graph(&mut e, net, theta, xs[i], ys[i], &terms, score, reg, row_seed);
        scores.push(out.score);
        for (t, z) in out.pits.into_iter().enumerate() {
            term_pits[t].push(z);
        }
    }
    Ok(aggregate_loss(&mut e, &scores, &term_pits, &terms, reg, &grid))
}

fn check_batch(
    net: &NetworkConfig,
    theta: &[f64],
    xs: &[&[f64]],
    ys: &[&[f64]],
    reg: &RegularizerConfig,
) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::invalid("objective needs a nonempty batch"));
    }
    if theta.len() != net.param_count() {
        return Err(Error::DimensionMismatch {
            expected: net.param_count(),
            got: theta.len(),
        });
    }
    reg.validate(net.output_dim)?;
    Ok(())
}

/// Objective value and its exact gradient with respect to `theta`.
///
/// Rows are processed in fixed-size chunks in parallel; the chunk
/// results are combined in index order, so the gradient is bitwise
/// reproducible for any thread count.
pub fn objective_grad(
    net: &NetworkConfig,
    theta: &[f64],
    xs: &[&[f64]],
    ys: &[&[f64]],
    reg: &RegularizerConfig,
    score: ScoreKind,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    objective_grad_at_step(net, theta, xs, ys, reg, score, seed, 0)
}

#[allow(clippy::too_many_arguments)]
fn objective_grad_at_step(
    net: &NetworkConfig,
    theta: &[f64],
    xs: &[&[f64]],
    ys: &[&[f64]],
    reg: &RegularizerConfig,
    score: ScoreKind,
    seed: u64,
    step: u64,
) -> Result<(f64, Vec<f64>)> {
    check_batch(net, theta, xs, ys, reg)?;
    let terms = resolve_terms(net, theta, xs, reg, seed, step)?;
    let grid = QuantileGrid::new(reg.grid_size)?;
    let n = xs.len();

    // Stage 1: independent row graphs, chunked.
    struct Chunk {
        start: usize,
        tape: Tape,
        theta_vars: Vec<Var>,
        rows: Vec<RowOut<Var>>,
    }
    let chunks: Vec<Chunk> = (0..n)
        .step_by(GRAD_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + GRAD_CHUNK).min(n);
            let mut tape = Tape::new();
            let theta_vars = tape.input_block(theta);
            let rows: Vec<RowOut<Var>> = (start..end)
                .map(|i| {
                    let row_seed = row_noise_seed(reg, seed, step, i as u64);
                    row_graph(
                        &mut tape, net, &theta_vars, xs[i], ys[i], &terms, score, reg, row_seed,
                    )
                })
                .collect();
            Chunk {
                start,
                tape,
                theta_vars,
                rows,
            }
        })
        .collect();

    // Stage 2: aggregation graph over the row outputs.
    let mut agg = Tape::new();
    let mut score_vars = Vec::with_capacity(n);
    let mut pit_vars: Vec<Vec<Var>> = vec![Vec::with_capacity(n); terms.len()];
    for chunk in &chunks {
        for row in &chunk.rows {
            score_vars.push(agg.input(chunk.tape.value(row.score)));
            for (t, &z) in row.pits.iter().enumerate() {
                pit_vars[t].push(agg.input(chunk.tape.value(z)));
            }
        }
    }
    let loss_node = aggregate_loss(&mut agg, &score_vars, &pit_vars, &terms, reg, &grid);
    let loss = agg.value(loss_node);
    let cotangents = agg.backward(loss_node);

    // Stage 3: seed each chunk's backward sweep with the aggregation
    // cotangents; reduce parameter gradients in chunk order.
    let chunk_grads: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut seeds_vec: Vec<(Var, f64)> = Vec::new();
            for (local, row) in chunk.rows.iter().enumerate() {
                let global = chunk.start + local;
                seeds_vec.push((row.score, cotangents[score_vars[global]]));
                for (t, &z) in row.pits.iter().enumerate() {
                    seeds_vec.push((z, cotangents[pit_vars[t][global]]));
                }
            }
            chunk.tape.backward_seeded(&seeds_vec).collect(&chunk.theta_vars)
        })
        .collect();
    let mut gradient = vec![0.0; theta.len()];
    for cg in chunk_grads {
        for (g, c) in gradient.iter_mut().zip(cg) {
            *g += c;
        }
    }
    Ok((loss, gradient))
}

/// First-order adaptive moment optimizer (standard bias-corrected
/// variant).
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Optimizer-loop settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub score: ScoreKind,
    /// Samples per row for validation-time energy scores.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            score: ScoreKind::Nll,
            eval_samples: 100,
        }
    }
}

/// One epoch's record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
    /// Hard-PIT validation PCE per configured pre-rank group.
    pub val_pce: Vec<(String, f64)>,
}

/// Per-epoch history plus the index of the best epoch (minimum
/// validation objective).
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_objective: f64,
}

/// Result of a training run: the best-epoch network plus summary
/// metrics evaluated with it on the validation split.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: MixtureNetwork,
    pub history: TrainHistory,
    /// Validation energy score of the best epoch's weights.
    pub val_energy_score: f64,
    /// Validation PCE (hard PITs) of the main pre-rank group, best epoch.
    pub val_pce_main: f64,
}

/// Pre-rank groups reported during validation: family groups average
/// their members' PCEs.
fn validation_groups(
    reg: &RegularizerConfig,
    net: &NetworkConfig,
    network: &MixtureNetwork,
    val_xs: &[&[f64]],
    seed: u64,
) -> Result<Vec<(String, Vec<PreRankSpec>)>> {
    let dim = net.output_dim;
    let mut groups: Vec<(String, Vec<PreRankSpec>)> = Vec::new();
    let add_family = |sel: PreRankSel, groups: &mut Vec<(String, Vec<PreRankSpec>)>| -> Result<()> {
        match sel {
            PreRankSel::One(spec) => groups.push((spec.token().to_string(), vec![spec])),
            PreRankSel::MarginalMean => groups.push((
                "marginal".to_string(),
                (1..=dim).map(|d| PreRankSpec::Marginal { d }).collect(),
            )),
            PreRankSel::PcaMean => {
                let d_star = batch_d_star(
                    net,
                    &network.weights.params,
                    val_xs,
                    reg,
                    seed,
                    0,
                )?;
                groups.push((
                    "pca".to_string(),
                    (1..=d_star).map(|d| PreRankSpec::Pca { d }).collect(),
                ));
            }
        }
        Ok(())
    };
    match reg.composition {
        Composition::Plain => {}
        Composition::MarginalPlus => add_family(PreRankSel::MarginalMean, &mut groups)?,
        Composition::PcaPlus => add_family(PreRankSel::PcaMean, &mut groups)?,
    }
    add_family(reg.prerank, &mut groups)?;
    Ok(groups)
}

/// Mean hard-PIT PCE of each group on the given rows.
fn group_pces(
    network: &MixtureNetwork,
    xs: &[&[f64]],
    ys: &[&[f64]],
    groups: &[(String, Vec<PreRankSpec>)],
    reg: &RegularizerConfig,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let grid = QuantileGrid::new(reg.grid_size)?;
    let cfg = PitBatchConfig {
        sample_count: reg.sample_count,
        tau: reg.tau,
        mode: PitMode::Hard,
        seed,
    };
    groups
        .iter()
        .map(|(name, specs)| {
            let mut total = 0.0;
            for &spec in specs {
                let batch = pit_batch(spec, network, xs, ys, &cfg)?;
                total += pce(&batch, &grid)?;
            }
            Ok((name.clone(), total / specs.len() as f64))
        })
        .collect()
}

fn mean_val_score(
    network: &MixtureNetwork,
    xs: &[&[f64]],
    ys: &[&[f64]],
    score: ScoreKind,
    eval_samples: usize,
    seed: u64,
) -> Result<f64> {
    match score {
        ScoreKind::Nll => {
            let total: f64 = (0..xs.len())
                .into_par_iter()
                .map(|i| -> Result<f64> {
                    let mix = network.forward(xs[i])?;
                    Ok(-mix.log_density(ys[i])?)
                })
                .collect::<Result<Vec<f64>>>()?
                .iter()
                .sum();
            Ok(total / xs.len() as f64)
        }
        ScoreKind::Energy => mean_energy_score(network, xs, ys, eval_samples, seed),
    }
}

/// Mean empirical energy score over rows, G samples per row.
pub fn mean_energy_score(
    network: &MixtureNetwork,
    xs: &[&[f64]],
    ys: &[&[f64]],
    samples_per_row: usize,
    seed: u64,
) -> Result<f64> {
    let total: f64 = (0..xs.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mix = network.forward(xs[i])?;
            let draw = mix.sample(seeds::split2(seed, TAG_VAL, i as u64), samples_per_row)?;
            energy_score(&draw, ys[i])
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / xs.len() as f64)
}

/// Trains a mixture network with the regularized objective, mini-batch
/// Adam, and early stopping on the validation objective (score plus
/// `lambda` times the composed hard-PIT PCE). Deterministic given the
/// config seed.
pub fn train(
    net: &NetworkConfig,
    config: &TrainConfig,
    reg: &RegularizerConfig,
    train_data: &Dataset,
    val_data: &Dataset,
) -> Result<TrainOutcome> {
    net.validate()?;
    reg.validate(net.output_dim)?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::invalid("training and validation splits must be nonempty"));
    }
    if config.batch_size == 0 || config.max_epochs == 0 || config.patience == 0 {
        return Err(Error::invalid("batch size, epochs, and patience must be positive"));
    }
    let mut weights = init_weights(net, config.seed)?;
    let mut adam = Adam::new(config.learning_rate, weights.params.len());
    let n = train_data.len();
    let train_xs = train_data.feature_rows();
    let train_ys = train_data.target_rows();
    let val_xs = val_data.feature_rows();
    let val_ys = val_data.target_rows();

    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut step: u64 = 0;

    for epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeds::rng_for(seeds::split2(config.seed, TAG_EPOCH_SHUFFLE, epoch as u64));
        for i in (1..n).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_xs[i]).collect();
            let ys: Vec<&[f64]> = batch.iter().map(|&i| train_ys[i]).collect();
            let (loss, gradient) = objective_grad_at_step(
                net,
                &weights.params,
                &xs,
                &ys,
                reg,
                config.score,
                config.seed,
                step,
            )?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, batch_index });
            }
            adam.step(&mut weights.params, &gradient);
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let train_loss = epoch_loss / batches as f64;

        let network = MixtureNetwork::new(net.clone(), weights.clone())?;
        let val_seed = seeds::split(config.seed, TAG_VAL);
        let val_score = mean_val_score(
            &network,
            &val_xs,
            &val_ys,
            config.score,
            config.eval_samples,
            val_seed,
        )?;
        let groups = validation_groups(reg, net, &network, &val_xs, val_seed)?;
        let val_pce = group_pces(&network, &val_xs, &val_ys, &groups, reg, val_seed)?;
        let val_objective =
            val_score + reg.lambda * val_pce.iter().map(|(_, p)| p).sum::<f64>();
        if !val_objective.is_finite() {
            return Err(Error::NanLoss { epoch, batch_index: usize::MAX });
        }
        history.epochs.push(EpochRow {
            epoch,
            train_loss,
            val_score,
            val_pce,
        });
        let improved = match &best {
            None => true,
            Some((_, best_obj, _)) => val_objective < *best_obj,
        };
        if improved {
            best = Some((epoch, val_objective, weights.params.clone()));
        }
        let best_epoch = best.as_ref().expect("set above").0;
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let (best_epoch, best_val_objective, best_params) = best.expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    history.best_val_objective = best_val_objective;
    let network = MixtureNetwork::new(
        net.clone(),
        ModelWeights {
            params: best_params,
            init_seed: config.seed,
        },
    )?;
    let val_seed = seeds::split(config.seed, TAG_VAL);
    let val_energy_score =
        mean_energy_score(&network, &val_xs, &val_ys, config.eval_samples, val_seed)?;
    let groups = validation_groups(reg, net, &network, &val_xs, val_seed)?;
    let main_group = reg.prerank.group_name();
    let val_pce_all = group_pces(&network, &val_xs, &val_ys, &groups, reg, val_seed)?;
    let val_pce_main = val_pce_all
        .iter()
        .find(|(g, _)| *g == main_group)
        .map(|(_, p)| *p)
        .unwrap_or(f64::NAN);
    Ok(TrainOutcome {
        network,
        history,
        val_energy_score,
        val_pce_main,
    })
}

/// One row of a [`TuneReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneEntry {
    pub lambda: f64,
    pub val_pce: f64,
    pub val_energy_score: f64,
    /// Whether the run stayed within the energy-score budget.
    pub qualifies: bool,
}

/// Outcome of the regularization-strength sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneReport {
    pub entries: Vec<TuneEntry>,
    /// Validation energy score of the best unregularized epoch.
    pub reference_es: f64,
    /// `1.1 * reference_es`: the admissible ES ceiling.
    pub es_budget: f64,
    pub selected: f64,
}

/// Trains once per candidate `lambda` and picks the qualifying value
/// with the lowest validation PCE: qualifying means the validation
/// energy score stays within 10% of the `lambda = 0` reference. Ties
/// break toward the smaller `lambda`; if nothing else qualifies the
/// answer is 0.
pub fn tune_lambda(
    grid: &[f64],
    net: &NetworkConfig,
    config: &TrainConfig,
    reg_template: &RegularizerConfig,
    train_data: &Dataset,
    val_data: &Dataset,
) -> Result<TuneReport> {
    if !grid.contains(&0.0) {
        return Err(Error::invalid("lambda grid must contain 0"));
    }
    let mut lambdas: Vec<f64> = grid.to_vec();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lambdas.dedup();
    if lambdas.iter().any(|&l| l < 0.0) {
        return Err(Error::invalid("lambda values must be nonnegative"));
    }

    let mut outcomes = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let mut reg = reg_template.clone();
        reg.lambda = lambda;
        let outcome = train(net, config, &reg, train_data, val_data)?;
        outcomes.push((lambda, outcome));
    }
    let reference_es = outcomes
        .iter()
        .find(|(l, _)| *l == 0.0)
        .map(|(_, o)| o.val_energy_score)
        .expect("grid contains 0");
    let es_budget = 1.1 * reference_es;

    let entries: Vec<TuneEntry> = outcomes
        .iter()
        .map(|(lambda, o)| TuneEntry {
            lambda: *lambda,
            val_pce: o.val_pce_main,
            val_energy_score: o.val_energy_score,
            qualifies: o.val_energy_score <= es_budget,
        })
        .collect();
    let selected = entries
        .iter()
        .filter(|e| e.qualifies)
        .min_by(|a, b| {
            a.val_pce
                .partial_cmp(&b.val_pce)
                .unwrap()
                .then(a.lambda.partial_cmp(&b.lambda).unwrap())
        })
        .map(|e| e.lambda)
        .unwrap_or(0.0);
    Ok(TuneReport {
        entries,
        reference_es,
        es_budget,
        selected,
    })
}
