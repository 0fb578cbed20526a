//! Calibration metrics and significance machinery.
//!
//! The probabilistic calibration error (PCE) is the mean absolute
//! deviation between a grid of quantile levels and the empirical CDF of
//! PIT values at those levels. Its sigmoid-smoothed counterpart
//! (PCE-KDE) is differentiable and serves as the training regularizer.
//! Observed PCEs are judged against a simulated null distribution of
//! PCEs under perfect calibration, with Holm correction across the
//! family of pre-ranks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Engine, Eval};
use crate::error::{Error, Result};
use crate::pit::PitBatch;
use crate::preranks::PreRankSpec;
use crate::seeds;

/// Interior grid of quantile levels `alpha_j = j / (M + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    /// Builds the `M`-point interior grid.
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("quantile grid needs at least one level"));
        }
        let levels = (1..=m).map(|j| j as f64 / (m + 1) as f64).collect();
        Ok(QuantileGrid { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

impl Default for QuantileGrid {
    fn default() -> Self {
        QuantileGrid::new(100).expect("valid default grid")
    }
}

/// Empirical CDF of `values` at each grid level, two-pointer style.
fn empirical_cdf_at_levels(sorted_values: &[f64], levels: &[f64]) -> Vec<f64> {
    let n = sorted_values.len();
    let mut out = Vec::with_capacity(levels.len());
    let mut idx = 0usize;
    for &alpha in levels {
        while idx < n && sorted_values[idx] <= alpha {
            idx += 1;
        }
        out.push(idx as f64 / n as f64);
    }
    out
}

fn pce_of_values(values: &[f64], grid: &QuantileGrid) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pce_of_sorted(&sorted, grid)
}

fn pce_of_sorted(sorted: &[f64], grid: &QuantileGrid) -> f64 {
    let cdf = empirical_cdf_at_levels(sorted, grid.levels());
    let m = grid.len() as f64;
    grid.levels()
        .iter()
        .zip(&cdf)
        .map(|(a, f)| (a - f).abs())
        .sum::<f64>()
        / m
}

/// Probabilistic calibration error of a PIT batch.
pub fn pce(pits: &PitBatch, grid: &QuantileGrid) -> Result<f64> {
    if pits.is_empty() {
        return Err(Error::UndefinedMetric("PCE of an empty PIT batch"));
    }
    Ok(pce_of_values(&pits.pit_values, grid))
}

/// Differentiable PCE surrogate with a sigmoid-smoothed empirical CDF:
/// `(1/M) sum_j |alpha_j - (1/N) sum_i sigmoid(tau (alpha_j - Z_i))|^p`.
///
/// For `p = 1` the kink at zero uses subgradient 0.
pub fn pce_kde(pits: &PitBatch, grid: &QuantileGrid, tau: f64, p: f64) -> Result<f64> {
    if pits.is_empty() {
        return Err(Error::UndefinedMetric("PCE-KDE of an empty PIT batch"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature tau must be positive"));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid("penalty exponent p must be at least 1"));
    }
    Ok(pce_kde_in(&mut Eval, &pits.pit_values, grid, tau, p))
}

/// Generic body of [`pce_kde`], usable on the autodiff tape.
pub fn pce_kde_in<E: Engine>(
    e: &mut E,
    pits: &[E::Value],
    grid: &QuantileGrid,
    tau: f64,
    p: f64,
) -> E::Value {
    let n_inv = 1.0 / pits.len() as f64;
    let deviations: Vec<E::Value> = grid
        .levels()
        .iter()
        .map(|&alpha| {
            let terms: Vec<E::Value> = pits
                .iter()
                .map(|&z| {
                    let nz = e.neg(z);
                    let diff = e.shift(nz, alpha);
                    let scaled = e.scale(diff, tau);
                    e.sigmoid(scaled)
                })
                .collect();
            let total = e.sum(&terms);
            let phi = e.scale(total, n_inv);
            let nphi = e.neg(phi);
            let dev = e.shift(nphi, alpha);
            e.abs_pow(dev, p)
        })
        .collect();
    let total = e.sum(&deviations);
    e.scale(total, 1.0 / grid.len() as f64)
}

/// Reliability curve: `(alpha_j, Fhat_Z(alpha_j))` pairs.
pub fn reliability_curve(pits: &PitBatch, grid: &QuantileGrid) -> Result<Vec<(f64, f64)>> {
    if pits.is_empty() {
        return Err(Error::UndefinedMetric("reliability curve of an empty PIT batch"));
    }
    let mut sorted = pits.pit_values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cdf = empirical_cdf_at_levels(&sorted, grid.levels());
    Ok(grid.levels().iter().copied().zip(cdf).collect())
}

/// Simulated distribution of the PCE statistic under perfect
/// calibration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NullDistribution {
    pub n_test: usize,
    /// Pre-rank the null is matched to, if any; the statistic itself is
    /// pre-rank-agnostic.
    pub prerank: Option<PreRankSpec>,
    /// Simulated PCE statistics (unsorted, in simulation order).
    pub statistics: Vec<f64>,
    pub n_sims: usize,
    /// Number of independent PCEs averaged per statistic (1 for the
    /// single-run null, k for a k-run-mean null).
    pub runs_per_statistic: usize,
}

impl NullDistribution {
    /// Upper `q`-quantile of the simulated statistics (e.g. `0.95`).
    pub fn percentile(&self, q: f64) -> f64 {
        let mut sorted = self.statistics.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = (q * (sorted.len() - 1) as f64).round() as usize;
        sorted[pos.min(sorted.len() - 1)]
    }

    pub fn with_prerank(mut self, prerank: PreRankSpec) -> Self {
        self.prerank = Some(prerank);
        self
    }
}

/// Null distribution of the single-run PCE: each statistic is the PCE
/// of `n_test` independent uniform PITs. Deterministic given `seed`.
pub fn null_pce_distribution(
    n_test: usize,
    grid: &QuantileGrid,
    n_sims: usize,
    seed: u64,
) -> Result<NullDistribution> {
    null_pce_distribution_mean(n_test, grid, n_sims, 1, seed)
}

/// Null distribution of the mean of `runs` independent PCE statistics,
/// for judging PCEs that were averaged over several runs.
pub fn null_pce_distribution_mean(
    n_test: usize,
    grid: &QuantileGrid,
    n_sims: usize,
    runs: usize,
    seed: u64,
) -> Result<NullDistribution> {
    if n_test == 0 {
        return Err(Error::invalid("null distribution needs n_test >= 1"));
    }
    if n_sims == 0 {
        return Err(Error::invalid("null distribution needs n_sims >= 1"));
    }
    if runs == 0 {
        return Err(Error::invalid("runs per statistic must be at least 1"));
    }
    let statistics: Vec<f64> = (0..n_sims)
        .into_par_iter()
        .map(|sim| {
            let mut total = 0.0;
            for run in 0..runs {
                let mut rng = seeds::rng_for(seeds::split2(seed, sim as u64, run as u64));
                let mut z: Vec<f64> = (0..n_test).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                z.sort_by(|a, b| a.partial_cmp(b).unwrap());
                total += pce_of_sorted(&z, grid);
            }
            total / runs as f64
        })
        .collect();
    Ok(NullDistribution {
        n_test,
        prerank: None,
        statistics,
        n_sims,
        runs_per_statistic: runs,
    })
}

/// One-sided p-value with add-one smoothing:
/// `(1 + #{s : s >= observed}) / (1 + n_sims)`.
///
/// The smoothing keeps p strictly positive, which downstream Holm
/// adjustment relies on.
pub fn p_value(observed_pce: f64, null: &NullDistribution) -> f64 {
    let exceed = null.statistics.iter().filter(|&&s| s >= observed_pce).count();
    (1 + exceed) as f64 / (1 + null.n_sims) as f64
}

/// Step-down Holm adjustment, restored to input order. Output is
/// monotone in the input and never below it.
pub fn holm_correct(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).unwrap());
    let mut adjusted = vec![0.0; m];
    let mut running_max = 0.0f64;
    for (rank, &idx) in order.iter().enumerate() {
        let scaled = ((m - rank) as f64 * p_values[idx]).min(1.0);
        running_max = running_max.max(scaled);
        adjusted[idx] = running_max;
    }
    adjusted
}

/// Per-pre-rank calibration summary inside a [`CalibrationReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreRankSummary {
    pub prerank: String,
    pub pce: f64,
    pub p_value: f64,
    pub holm_p: f64,
    /// `[alpha, empirical_cdf]` pairs.
    pub reliability: Vec<(f64, f64)>,
}

/// Full evaluation output: per-pre-rank calibration diagnostics plus
/// the proper scores of the predictive distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub nll: f64,
    pub energy_score: f64,
    pub preranks: Vec<PreRankSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pit::PitMode;
    use rand::Rng;

    fn batch(values: Vec<f64>) -> PitBatch {
        PitBatch {
            pit_values: values,
            mode: PitMode::Hard,
            prerank: PreRankSpec::Location,
            sample_count: 100,
        }
    }

    #[test]
    fn grid_is_interior_and_increasing() {
        let grid = QuantileGrid::new(100).unwrap();
        assert_eq!(grid.len(), 100);
        assert!((grid.levels()[0] - 1.0 / 101.0).abs() < 1e-15);
        assert!((grid.levels()[99] - 100.0 / 101.0).abs() < 1e-15);
        for w in grid.levels().windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn pce_of_all_zero_pits_is_half() {
        // Empirical CDF is identically 1; mean |1 - alpha| over the
        // symmetric interior grid is exactly 0.5.
        let grid = QuantileGrid::new(100).unwrap();
        let v = pce(&batch(vec![0.0; 50]), &grid).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pce_balanced_two_point_batch() {
        let grid = QuantileGrid::new(1).unwrap();
        assert_eq!(grid.levels(), &[0.5]);
        let v = pce(&batch(vec![0.25, 0.75]), &grid).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn pce_of_near_uniform_grid_points_is_small() {
        let n = 99;
        let values: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let grid = QuantileGrid::new(100).unwrap();
        // Independent direct evaluation.
        let mut direct = 0.0;
        for &alpha in grid.levels() {
            let cdf = values.iter().filter(|&&z| z <= alpha).count() as f64 / n as f64;
            direct += (alpha - cdf).abs();
        }
        direct /= grid.len() as f64;
        let v = pce(&batch(values), &grid).unwrap();
        assert!((v - direct).abs() < 1e-15);
        assert!(v <= 0.01, "pce = {v}");
    }

    #[test]
    fn pce_rejects_empty_batch() {
        let grid = QuantileGrid::default();
        assert!(matches!(
            pce(&batch(vec![]), &grid),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pce_is_permutation_invariant() {
        let mut rng = seeds::rng_for(3);
        let values: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let grid = QuantileGrid::default();
        let a = pce(&batch(values.clone()), &grid).unwrap();
        let mut shuffled = values;
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let b = pce(&batch(shuffled), &grid).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn pce_kde_centered_single_level_is_zero() {
        let grid = QuantileGrid::new(1).unwrap();
        let v = pce_kde(&batch(vec![0.5; 10]), &grid, 123.0, 1.0).unwrap();
        assert!(v < 1e-12);
    }

    #[test]
    fn pce_kde_single_pit_hand_value() {
        // grid {0.25}, Z = 0.5: Phi = sigmoid(100 * -0.25) ~ 1.4e-11.
        let grid = QuantileGrid::new(1).unwrap();
        let custom = QuantileGrid {
            levels: vec![0.25],
        };
        let _ = grid;
        let v = pce_kde(&batch(vec![0.5]), &custom, 100.0, 1.0).unwrap();
        assert!((v - 0.25).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn pce_kde_approaches_pce_at_high_temperature() {
        let mut rng = seeds::rng_for(7);
        let grid = QuantileGrid::default();
        for _ in 0..50 {
            let n = rng.random_range(5..80usize);
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let b = batch(values);
            let hard = pce(&b, &grid).unwrap();
            let soft = pce_kde(&b, &grid, 1e6, 1.0).unwrap();
            assert!((hard - soft).abs() < 1e-4, "hard {hard} soft {soft}");
        }
    }

    #[test]
    fn pce_kde_gradient_matches_finite_differences() {
        use crate::autodiff::Tape;
        let mut rng = seeds::rng_for(11);
        let grid = QuantileGrid::new(10).unwrap();
        for &p in &[1.0, 2.0] {
            'instance: for _ in 0..20 {
                let n = rng.random_range(3..12usize);
                let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let tau = 50.0;
                // Stay away from the p = 1 kink.
                let phi = |vals: &[f64], alpha: f64| -> f64 {
                    vals.iter()
                        .map(|&z| crate::autodiff::sigmoid_f64(tau * (alpha - z)))
                        .sum::<f64>()
                        / vals.len() as f64
                };
                for &alpha in grid.levels() {
                    if (alpha - phi(&values, alpha)).abs() <= 1e-3 {
                        continue 'instance;
                    }
                }
                let mut tape = Tape::new();
                let vars = tape.input_block(&values);
                let out = pce_kde_in(&mut tape, &vars, &grid, tau, p);
                let grads = tape.backward(out);
                let h = 1e-5;
                for i in 0..n {
                    let mut vp = values.clone();
                    vp[i] += h;
                    let mut vm = values.clone();
                    vm[i] -= h;
                    let fd = (pce_kde(&batch(vp), &grid, tau, p).unwrap()
                        - pce_kde(&batch(vm), &grid, tau, p).unwrap())
                        / (2.0 * h);
                    let ad = grads[vars[i]];
                    assert!(
                        (ad - fd).abs() <= 1e-4 * (1.0f64).max(fd.abs()),
                        "p={p} i={i}: ad={ad} fd={fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn reliability_curve_examples() {
        let grid = QuantileGrid::new(10).unwrap();
        // Uniform PITs at grid points: curve close to the diagonal.
        let n = 200;
        let values: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let curve = reliability_curve(&batch(values), &grid).unwrap();
        for (alpha, cdf) in &curve {
            assert!((alpha - cdf).abs() <= 1.0 / n as f64 + 1e-12);
        }
        // All-zero PITs: curve identically 1.
        let curve = reliability_curve(&batch(vec![0.0; 10]), &grid).unwrap();
        for (_, cdf) in &curve {
            assert_eq!(*cdf, 1.0);
        }
        // Monotone in alpha.
        let mut rng = seeds::rng_for(13);
        let values: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let curve = reliability_curve(&batch(values), &grid).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn reliability_curve_consistent_with_pce() {
        let mut rng = seeds::rng_for(17);
        let grid = QuantileGrid::default();
        let values: Vec<f64> = (0..123).map(|_| rng.random::<f64>()).collect();
        let b = batch(values);
        let curve = reliability_curve(&b, &grid).unwrap();
        let manual: f64 =
            curve.iter().map(|(a, f)| (a - f).abs()).sum::<f64>() / grid.len() as f64;
        let direct = pce(&b, &grid).unwrap();
        assert_eq!(manual.to_bits(), direct.to_bits());
    }

    #[test]
    fn null_statistics_for_single_observation_live_on_known_support() {
        // With n_test = 1 the statistic takes one of M+1 values
        // determined by where Z falls in the grid.
        let grid = QuantileGrid::new(10).unwrap();
        let m = grid.len();
        let mut support: Vec<f64> = (0..=m)
            .map(|k| {
                // Z between alpha_k and alpha_{k+1}: indicator is 1 for
                // levels above k.
                let mut total = 0.0;
                for (j, &alpha) in grid.levels().iter().enumerate() {
                    total += if j < k { alpha } else { 1.0 - alpha };
                }
                total / m as f64
            })
            .collect();
        support.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let null = null_pce_distribution(1, &grid, 2000, 5).unwrap();
        for &s in &null.statistics {
            let hit = support.iter().any(|&v| (v - s).abs() < 1e-12);
            assert!(hit, "statistic {s} not on enumerated support");
        }
    }

    #[test]
    fn null_shrinks_with_sample_size() {
        let grid = QuantileGrid::default();
        for seed in 0..5 {
            let small = null_pce_distribution(100, &grid, 400, seed).unwrap();
            let large = null_pce_distribution(10_000, &grid, 400, seed).unwrap();
            let median = |d: &NullDistribution| d.percentile(0.5);
            assert!(median(&large) < median(&small));
        }
    }

    #[test]
    fn null_is_deterministic_and_seed_sensitive() {
        let grid = QuantileGrid::default();
        let a = null_pce_distribution(50, &grid, 100, 9).unwrap();
        let b = null_pce_distribution(50, &grid, 100, 9).unwrap();
        assert_eq!(a.statistics, b.statistics);
        let c = null_pce_distribution(50, &grid, 100, 10).unwrap();
        assert_ne!(a.statistics, c.statistics);
    }

    #[test]
    fn disjoint_seeds_agree_on_the_mean() {
        let grid = QuantileGrid::default();
        let a = null_pce_distribution(1000, &grid, 50_000, 100).unwrap();
        let b = null_pce_distribution(1000, &grid, 50_000, 200).unwrap();
        let mean = |d: &NullDistribution| d.statistics.iter().sum::<f64>() / d.n_sims as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        assert!((ma - mb).abs() / ma < 0.02, "means {ma} vs {mb}");
    }

    #[test]
    fn k_run_mean_null_is_tighter() {
        let grid = QuantileGrid::default();
        let single = null_pce_distribution(200, &grid, 2000, 31).unwrap();
        let mean5 = null_pce_distribution_mean(200, &grid, 2000, 5, 31).unwrap();
        let sd = |d: &NullDistribution| {
            let m = d.statistics.iter().sum::<f64>() / d.n_sims as f64;
            (d.statistics.iter().map(|s| (s - m).powi(2)).sum::<f64>() / d.n_sims as f64).sqrt()
        };
        assert!(sd(&mean5) < sd(&single) * 0.6);
    }

    #[test]
    fn p_value_extremes_and_median() {
        let grid = QuantileGrid::default();
        let null = null_pce_distribution(100, &grid, 999, 41).unwrap();
        // Observed below every simulated statistic.
        assert_eq!(p_value(0.0, &null), 1.0);
        // Observed above all statistics.
        let hi = null.statistics.iter().cloned().fold(0.0f64, f64::max) + 1.0;
        assert!((p_value(hi, &null) - 1.0 / 1000.0).abs() < 1e-15);
        // Observed at the median: p about one half.
        let med = null.percentile(0.5);
        let p = p_value(med, &null);
        assert!((p - 0.5).abs() < 2.0 / (999f64).sqrt(), "p = {p}");
    }

    #[test]
    fn holm_hand_cases() {
        assert_eq!(holm_correct(&[0.2]), vec![0.2]);
        let adj = holm_correct(&[0.01, 0.04]);
        assert!((adj[0] - 0.02).abs() < 1e-15);
        assert!((adj[1] - 0.04).abs() < 1e-15);
        assert_eq!(holm_correct(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn holm_is_monotone_and_dominates_raw() {
        let mut rng = seeds::rng_for(43);
        for _ in 0..100 {
            let m = rng.random_range(1..10usize);
            let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let adj = holm_correct(&p);
            for i in 0..m {
                assert!(adj[i] >= p[i] - 1e-15);
                assert!(adj[i] <= 1.0);
                for j in 0..m {
                    if p[i] <= p[j] {
                        assert!(adj[i] <= adj[j] + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn null_stochastic_dominance_in_n_test() {
        // Larger test sets give stochastically smaller statistics:
        // their empirical CDF should dominate everywhere.
        let grid = QuantileGrid::default();
        let small = null_pce_distribution(100, &grid, 4000, 53).unwrap();
        let large = null_pce_distribution(1000, &grid, 4000, 54).unwrap();
        let mut s = small.statistics.clone();
        let mut l = large.statistics.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let qi = |v: &[f64]| v[(q * (v.len() - 1) as f64) as usize];
            assert!(qi(&l) < qi(&s), "quantile {q}");
        }
    }

    #[test]
    fn report_serializes_with_stable_field_names() {
        let report = CalibrationReport {
            nll: 1.5,
            energy_score: 0.7,
            preranks: vec![PreRankSummary {
                prerank: "location".into(),
                pce: 0.02,
                p_value: 0.3,
                holm_p: 0.6,
                reliability: vec![(0.25, 0.24), (0.5, 0.51)],
            }],
        };
        let json = serde_json::to_value(&report).unwrap();
        let entry = &json["preranks"][0];
        assert!(entry.get("prerank").is_some());
        assert!(entry.get("pce").is_some());
        assert!(entry.get("p_value").is_some());
        assert!(entry.get("holm_p").is_some());
        assert_eq!(entry["reliability"][0][0], 0.25);
    }
}
