//! Proper scoring rules: exact mixture NLL and the sample-based energy
//! score.

use crate::autodiff::Engine;
use crate::distributions::{MixtureParams, SampleSet};
use crate::error::Result;

/// Scores of one predictive distribution against one outcome.
#[derive(Clone, Copy, Debug)]
pub struct ScoreValue {
    /// Negative log-likelihood in nats; unbounded in both directions.
    pub nll: f64,
    /// Empirical energy score in target units.
    pub energy: f64,
}

/// Negative log-likelihood `-log f(y)`.
pub fn nll(params: &MixtureParams, y: &[f64]) -> Result<f64> {
    Ok(-params.log_density(y)?)
}

/// Empirical energy score from `G` predictive samples:
/// `(1/G) sum_i |yhat_i - y| - (1/(2 G^2)) sum_i sum_j |yhat_i - yhat_j|`.
///
/// Exact double sum, Euclidean norm, O(G^2 D).
pub fn energy_score(samples: &SampleSet, y: &[f64]) -> Result<f64> {
    if y.len() != samples.dim() {
        return Err(crate::error::Error::DimensionMismatch {
            expected: samples.dim(),
            got: y.len(),
        });
    }
    let rows: Vec<&[f64]> = samples.rows().collect();
    Ok(energy_score_values(&rows, y))
}

fn energy_score_values(rows: &[&[f64]], y: &[f64]) -> f64 {
    let g = rows.len() as f64;
    let mut to_obs = 0.0;
    for r in rows {
        to_obs += dist(r, y);
    }
    let mut pairwise = 0.0;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            pairwise += dist(rows[i], rows[j]);
        }
    }
    // The i = j diagonal contributes zero; off-diagonal pairs are
    // counted twice in the double sum.
    to_obs / g - pairwise / (g * g)
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Generic energy score for the autodiff tape. Self-pairs are skipped
/// (their value is zero and the norm has no derivative there).
pub fn energy_score_in<E: Engine>(e: &mut E, rows: &[Vec<E::Value>], y: &[E::Value]) -> E::Value {
    let g = rows.len() as f64;
    let to_obs: Vec<E::Value> = rows.iter().map(|r| dist_in(e, r, y)).collect();
    let first = e.sum(&to_obs);
    let first = e.scale(first, 1.0 / g);
    let mut pair_terms = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            pair_terms.push(dist_in(e, &rows[i], &rows[j]));
        }
    }
    if pair_terms.is_empty() {
        return first;
    }
    let pairwise = e.sum(&pair_terms);
    let second = e.scale(pairwise, 1.0 / (g * g));
    e.sub(first, second)
}

fn dist_in<E: Engine>(e: &mut E, a: &[E::Value], b: &[E::Value]) -> E::Value {
    let sq: Vec<E::Value> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = e.sub(x, y);
            e.mul(d, d)
        })
        .collect();
    let ssq = e.sum(&sq);
    e.sqrt(ssq)
}
