//! Conditional Gaussian-mixture predictive distributions.
//!
//! A predictive distribution is a mixture of `K` multivariate Gaussian
//! components in `D` dimensions, each parametrized by a weight, a mean,
//! and a lower-triangular Cholesky factor of its covariance. Densities
//! are evaluated through the Cholesky factor directly (forward
//! substitution, log-sum-exp over components); covariances are never
//! formed or inverted.
//!
//! The same formulas run both on plain `f64` and on an autodiff tape:
//! the `*_in` functions are generic over [`Engine`], and the inherent
//! methods on [`MixtureParams`] are their `f64` instantiations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Engine, Eval};
use crate::error::{Error, Result};
use crate::seeds;

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Packed length of a lower-triangular `d x d` matrix.
#[inline]
pub(crate) fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Index of entry `(row, col)` with `col <= row` in packed storage.
#[inline]
pub(crate) fn tri_idx(row: usize, col: usize) -> usize {
    row * (row + 1) / 2 + col
}

/// A `K`-component Gaussian mixture over `R^D`, generic in the scalar
/// type so the same structure holds plain numbers or tape variables.
///
/// Cholesky factors are stored packed row-major (lower triangle only),
/// so entries above the diagonal are structurally zero.
#[derive(Clone, Debug)]
pub struct Mixture<V> {
    dim: usize,
    weights: Vec<V>,
    log_weights: Vec<V>,
    means: Vec<Vec<V>>,
    chol_factors: Vec<Vec<V>>,
}

/// The plain-`f64` mixture: one conditional predictive distribution.
pub type MixtureParams = Mixture<f64>;

impl<V: Copy> Mixture<V> {
    pub(crate) fn from_parts(
        dim: usize,
        weights: Vec<V>,
        log_weights: Vec<V>,
        means: Vec<Vec<V>>,
        chol_factors: Vec<Vec<V>>,
    ) -> Self {
        Mixture {
            dim,
            weights,
            log_weights,
            means,
            chol_factors,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[V] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[V] {
        &self.log_weights
    }

    pub fn mean(&self, k: usize) -> &[V] {
        &self.means[k]
    }

    /// Packed lower-triangular Cholesky factor of component `k`.
    pub fn chol_factor(&self, k: usize) -> &[V] {
        &self.chol_factors[k]
    }

    pub fn chol_entry(&self, k: usize, row: usize, col: usize) -> V {
        self.chol_factors[k][tri_idx(row, col)]
    }
}

impl MixtureParams {
    /// Builds a mixture, checking the representation invariants:
    /// nonnegative weights summing to 1 within 1e-9, consistent
    /// dimensions, and strictly positive finite Cholesky diagonals.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, chol_factors: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let k = weights.len();
        if means.len() != k || chol_factors.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: means.len().min(chol_factors.len()),
            });
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be nonnegative and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights must sum to 1 within 1e-9 (got {total})"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be at least 1"));
        }
        for m in &means {
            if m.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.len(),
                });
            }
        }
        for l in &chol_factors {
            if l.len() != tri_len(dim) {
                return Err(Error::DimensionMismatch {
                    expected: tri_len(dim),
                    got: l.len(),
                });
            }
            for i in 0..dim {
                let d = l[tri_idx(i, i)];
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::invalid(format!(
                        "Cholesky diagonal must be strictly positive and finite (got {d})"
                    )));
                }
            }
        }
        let log_weights = weights.iter().map(|&w| w.ln()).collect();
        Ok(Mixture {
            dim,
            weights,
            log_weights,
            means,
            chol_factors,
        })
    }

    /// Isotropic single component, mostly for tests and docs.
    pub fn standard_normal(dim: usize) -> Self {
        let mut chol = vec![0.0; tri_len(dim)];
        for i in 0..dim {
            chol[tri_idx(i, i)] = 1.0;
        }
        MixtureParams::new(vec![1.0], vec![vec![0.0; dim]], vec![chol]).expect("valid")
    }

    /// Log predictive density at `y`.
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        Ok(log_density_in(&mut Eval, self, y))
    }

    /// Predictive density at `y` (never negative; underflow-safe via
    /// log-space evaluation).
    pub fn density(&self, y: &[f64]) -> Result<f64> {
        Ok(self.log_density(y)?.exp())
    }

    /// Draws `count` samples: component by categorical draw on the
    /// weights, then `y = mu_k + L_k z` with standard-normal `z`.
    /// Deterministic given `seed`.
    pub fn sample(&self, seed: u64, count: usize) -> Result<SampleSet> {
        if count == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let mut rng = seeds::rng_for(seed);
        let dim = self.dim;
        let mut data = Vec::with_capacity(count * dim);
        let mut comps = Vec::with_capacity(count);
        let mut z = vec![0.0; dim];
        for _ in 0..count {
            let u: f64 = rng.random();
            let k = categorical(&self.weights, u);
            comps.push(k as u32);
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let mean = &self.means[k];
            let chol = &self.chol_factors[k];
            for i in 0..dim {
                let mut acc = mean[i];
                for j in 0..=i {
                    acc += chol[tri_idx(i, j)] * z[j];
                }
                data.push(acc);
            }
        }
        Ok(SampleSet {
            dim,
            data,
            source_seed: seed,
            component_indices: comps,
        })
    }

    /// Rescales each output coordinate as `y -> (y - shift) / scale`,
    /// returning the mixture of the transformed variable. Used to move
    /// oracle generators into standardized units.
    pub fn coordinatewise_affine(&self, shift: &[f64], scale: &[f64]) -> Result<Self> {
        if shift.len() != self.dim || scale.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: shift.len().min(scale.len()),
            });
        }
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("scales must be positive"));
        }
        let means = self
            .means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(shift.iter().zip(scale))
                    .map(|(&v, (&sh, &sc))| (v - sh) / sc)
                    .collect()
            })
            .collect();
        let chols = self
            .chol_factors
            .iter()
            .map(|l| {
                let mut out = l.clone();
                for i in 0..self.dim {
                    for j in 0..=i {
                        out[tri_idx(i, j)] /= scale[i];
                    }
                }
                out
            })
            .collect();
        MixtureParams::new(self.weights.clone(), means, chols)
    }
}

/// Anything that maps a feature vector to a conditional predictive
/// distribution: trained networks, oracle generators, test stubs.
pub trait MixturePredictor {
    fn predict(&self, x: &[f64]) -> MixtureParams;
}

impl<F: Fn(&[f64]) -> MixtureParams> MixturePredictor for F {
    fn predict(&self, x: &[f64]) -> MixtureParams {
        self(x)
    }
}

/// Categorical draw from cumulative weights; assumes weights sum to ~1.
#[inline]
pub(crate) fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Mixture log density, generic over the compute engine.
///
/// Per component: `log w_k - D/2 ln(2 pi) - sum_i ln L_ii - |v|^2 / 2`
/// with `L v = y - mu_k` by forward substitution, combined by
/// log-sum-exp. Finite for all finite inputs as long as the Cholesky
/// diagonals are bounded away from zero.
pub fn log_density_in<E: Engine>(e: &mut E, mix: &Mixture<E::Value>, y: &[E::Value]) -> E::Value {
    let dim = mix.dim();
    let mut terms = Vec::with_capacity(mix.components());
    let mut solved: Vec<E::Value> = Vec::with_capacity(dim);
    for k in 0..mix.components() {
        let mean = mix.mean(k);
        let chol = mix.chol_factor(k);
        solved.clear();
        for i in 0..dim {
            let mut rhs = e.sub(y[i], mean[i]);
            if i > 0 {
                let off = e.dot(&chol[tri_idx(i, 0)..tri_idx(i, i)], &solved);
                rhs = e.sub(rhs, off);
            }
            let w = e.div(rhs, chol[tri_idx(i, i)]);
            solved.push(w);
        }
        let quad = e.dot(&solved, &solved);
        let mut log_det_terms = Vec::with_capacity(dim);
        for i in 0..dim {
            log_det_terms.push(e.ln(chol[tri_idx(i, i)]));
        }
        let log_det = e.sum(&log_det_terms);
        let half_quad = e.scale(quad, -0.5);
        let t0 = e.sub(half_quad, log_det);
        let t1 = e.shift(t0, -0.5 * dim as f64 * LN_2PI);
        terms.push(e.add(t1, mix.log_weights()[k]));
    }
    e.logsumexp(&terms)
}

/// Reparametrized samples `y_s = mu_k + L_k z_s` with the noise `z` and
/// component choices fixed as constants, so gradients flow through the
/// means and Cholesky factors only.
pub fn reparam_samples_in<E: Engine>(
    e: &mut E,
    mix: &Mixture<E::Value>,
    components: &[u32],
    noise: &[f64],
) -> Vec<Vec<E::Value>> {
    let dim = mix.dim();
    debug_assert_eq!(noise.len(), components.len() * dim);
    components
        .iter()
        .enumerate()
        .map(|(s, &k)| {
            let z = &noise[s * dim..(s + 1) * dim];
            let mean = mix.mean(k as usize);
            let chol = mix.chol_factor(k as usize);
            (0..dim)
                .map(|i| {
                    let lz = e.weighted_sum(&z[..=i], &chol[tri_idx(i, 0)..=tri_idx(i, i)]);
                    e.add(mean[i], lz)
                })
                .collect()
        })
        .collect()
}

/// Draws the component indices and noise for [`reparam_samples_in`]
/// from the mixture's current weight values. Deterministic given seed.
pub fn draw_reparam_noise<E: Engine>(
    e: &E,
    mix: &Mixture<E::Value>,
    seed: u64,
    count: usize,
) -> (Vec<u32>, Vec<f64>) {
    let weights: Vec<f64> = mix.weights().iter().map(|&w| e.value(w)).collect();
    let mut rng = seeds::rng_for(seed);
    let mut comps = Vec::with_capacity(count);
    let mut noise = Vec::with_capacity(count * mix.dim());
    for _ in 0..count {
        let u: f64 = rng.random();
        comps.push(categorical(&weights, u) as u32);
        for _ in 0..mix.dim() {
            noise.push(StandardNormal.sample(&mut rng));
        }
    }
    (comps, noise)
}

/// Smoothed Monte-Carlo estimate of the joint (lower-orthant) CDF:
/// `(1/S) sum_s prod_d sigmoid(tau * (y_d - yhat_{s,d}))`.
///
/// Strictly inside (0, 1), differentiable in `y` and the samples, and
/// monotone nondecreasing in every coordinate of `y`.
pub fn smooth_orthant_cdf_in<E: Engine>(
    e: &mut E,
    y: &[E::Value],
    rows: &[&[E::Value]],
    tau: f64,
) -> E::Value {
    let mut terms = Vec::with_capacity(rows.len());
    for row in rows {
        let mut prod: Option<E::Value> = None;
        for (d, &s) in row.iter().enumerate() {
            let diff = e.sub(y[d], s);
            let scaled = e.scale(diff, tau);
            let sig = e.sigmoid(scaled);
            prod = Some(match prod {
                None => sig,
                Some(p) => e.mul(p, sig),
            });
        }
        terms.push(prod.expect("dim >= 1"));
    }
    let total = e.sum(&terms);
    e.scale(total, 1.0 / rows.len() as f64)
}

/// `f64` front end of [`smooth_orthant_cdf_in`] over a [`SampleSet`].
pub fn smooth_orthant_cdf(y: &[f64], samples: &SampleSet, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature tau must be positive"));
    }
    if y.len() != samples.dim() {
        return Err(Error::DimensionMismatch {
            expected: samples.dim(),
            got: y.len(),
        });
    }
    let rows: Vec<&[f64]> = samples.rows().collect();
    Ok(smooth_orthant_cdf_in(&mut Eval, y, &rows, tau))
}

/// A batch of draws from one predictive distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    source_seed: u64,
    component_indices: Vec<u32>,
}

impl SampleSet {
    /// Assembles a sample set from explicit rows (used by tests and by
    /// generators that do not go through a mixture).
    pub fn from_rows(rows: &[Vec<f64>], source_seed: u64, component_indices: Vec<u32>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("a sample set needs at least one sample"));
        }
        let dim = rows[0].len();
        if component_indices.len() != rows.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: component_indices.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(SampleSet {
            dim,
            data,
            source_seed,
            component_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.component_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.component_indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.dim..(s + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    pub fn component_indices(&self) -> &[u32] {
        &self.component_indices
    }
}

/// Orthonormal eigenbasis of a sample covariance, eigenvalues
/// descending. Sign convention: in each eigenvector the entry of
/// largest absolute value is positive, so projections are reproducible.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PcaBasis {
    eigenvectors: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// The `d`-th eigenvector, 1-based, in descending eigenvalue order.
    pub fn component(&self, d: usize) -> &[f64] {
        &self.eigenvectors[d - 1]
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained_variance_ratio
    }

    /// Projection of `y` onto the `d`-th component (1-based).
    pub fn project(&self, d: usize, y: &[f64]) -> f64 {
        self.component(d).iter().zip(y).map(|(v, x)| v * x).sum()
    }
}

/// PCA of the sample covariance (centered, divisor `S - 1`) via cyclic
/// Jacobi rotations; adequate for the small output dimensions here.
pub fn pca_of_samples(samples: &SampleSet) -> Result<PcaBasis> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: s });
    }
    let d = samples.dim();
    let mut mean = vec![0.0; d];
    for row in samples.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= s as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in samples.rows() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..=i {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (s - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (mut eigenvalues, mut eigenvectors) = symmetric_eigen(cov, d);

    // Sort descending, clamp tiny negatives, fix signs.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    eigenvalues = order.iter().map(|&i| eigenvalues[i].max(0.0)).collect();
    eigenvectors = order
        .iter()
        .map(|&i| std::mem::take(&mut eigenvectors[i]))
        .collect();
    for v in eigenvectors.iter_mut() {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[best].abs() {
                best = i;
            }
        }
        if v[best] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
    }
    let total: f64 = eigenvalues.iter().sum();
    let explained_variance_ratio = if total > 0.0 {
        eigenvalues.iter().map(|&l| l / total).collect()
    } else {
        vec![1.0 / d as f64; d] // zero covariance: no direction explains anything
    };
    Ok(PcaBasis {
        eigenvectors,
        eigenvalues,
        explained_variance_ratio,
    })
}

/// Cyclic Jacobi eigendecomposition of a dense symmetric matrix
/// (row-major). Returns eigenvalues and eigenvectors in matching,
/// unsorted order.
pub(crate) fn symmetric_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let idx = |r: usize, c: usize| r * d + c;
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[idx(i, i)] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[idx(p, q)] * a[idx(p, q)];
            }
        }
        let scale: f64 = (0..d).map(|i| a[idx(i, i)].abs()).sum::<f64>().max(1e-300);
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[idx(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[idx(p, p)];
                let aqq = a[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..d {
                    if r != p && r != q {
                        let arp = a[idx(r, p)];
                        let arq = a[idx(r, q)];
                        a[idx(r, p)] = c * arp - s * arq;
                        a[idx(p, r)] = a[idx(r, p)];
                        a[idx(r, q)] = s * arp + c * arq;
                        a[idx(q, r)] = a[idx(r, q)];
                    }
                }
                a[idx(p, p)] = app - t * apq;
                a[idx(q, q)] = aqq + t * apq;
                a[idx(p, q)] = 0.0;
                a[idx(q, p)] = 0.0;
                for r in 0..d {
                    let vrp = v[idx(r, p)];
                    let vrq = v[idx(r, q)];
                    v[idx(r, p)] = c * vrp - s * vrq;
                    v[idx(r, q)] = s * vrp + c * vrq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..d).map(|i| a[idx(i, i)]).collect();
    let eigenvectors: Vec<Vec<f64>> = (0..d)
        .map(|col| (0..d).map(|row| v[idx(row, col)]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn random_mixture(seed: u64, k: usize, dim: usize) -> MixtureParams {
        let mut rng = seeds::rng_for(seed);
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.2).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let means = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let chols = (0..k)
            .map(|_| {
                let mut l = vec![0.0; tri_len(dim)];
                for i in 0..dim {
                    for j in 0..i {
                        l[tri_idx(i, j)] = rng.random_range(-0.3..0.3);
                    }
                    l[tri_idx(i, i)] = rng.random_range(0.5..1.5);
                }
                l
            })
            .collect();
        MixtureParams::new(weights, means, chols).unwrap()
    }

    #[test]
    fn standard_normal_log_density_at_mode() {
        let mix = MixtureParams::standard_normal(2);
        let ld = mix.log_density(&[0.0, 0.0]).unwrap();
        assert!((ld - (-LN_2PI)).abs() < 1e-12, "got {ld}");
    }

    #[test]
    fn duplicated_components_collapse_to_single() {
        let single = random_mixture(3, 1, 2);
        let doubled = MixtureParams::new(
            vec![0.5, 0.5],
            vec![single.mean(0).to_vec(), single.mean(0).to_vec()],
            vec![single.chol_factor(0).to_vec(), single.chol_factor(0).to_vec()],
        )
        .unwrap();
        for y in [[0.0, 0.0], [1.3, -0.4], [-2.0, 5.0]] {
            let a = single.log_density(&y).unwrap();
            let b = doubled.log_density(&y).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn density_integrates_to_one_on_fine_grid() {
        // 2-D midpoint quadrature over a box covering every component
        // out to 8 standard deviations.
        let mix = random_mixture(17, 3, 2);
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for k in 0..mix.components() {
            for i in 0..2 {
                let sd: f64 = (0..=i)
                    .map(|j| mix.chol_entry(k, i, j).powi(2))
                    .sum::<f64>()
                    .sqrt();
                lo[i] = lo[i].min(mix.mean(k)[i] - 8.0 * sd);
                hi[i] = hi[i].max(mix.mean(k)[i] + 8.0 * sd);
            }
        }
        let n = 800;
        let (dx, dy) = ((hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64);
        let mut total = 0.0;
        for i in 0..n {
            let x = lo[0] + (i as f64 + 0.5) * dx;
            for j in 0..n {
                let y = lo[1] + (j as f64 + 0.5) * dy;
                total += mix.log_density(&[x, y]).unwrap().exp();
            }
        }
        total *= dx * dy;
        assert!((total - 1.0).abs() < 1e-3, "integral = {total}");
    }

    #[test]
    fn degenerate_spread_concentrates_at_mean() {
        let eps = 1e-4;
        let mix = MixtureParams::new(
            vec![1.0],
            vec![vec![3.0, -1.0]],
            vec![vec![eps, 0.0, eps]],
        )
        .unwrap();
        let samples = mix.sample(9, 100).unwrap();
        for row in samples.rows() {
            assert!((row[0] - 3.0).abs() < 10.0 * eps);
            assert!((row[1] + 1.0).abs() < 10.0 * eps);
        }
    }

    #[test]
    fn zero_weight_component_never_drawn() {
        let mix = MixtureParams::new(
            vec![1.0, 0.0],
            vec![vec![0.0], vec![100.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        let samples = mix.sample(11, 500).unwrap();
        assert!(samples.component_indices().iter().all(|&k| k == 0));
    }

    #[test]
    fn sample_moments_match_law_of_large_numbers() {
        let mix = MixtureParams::standard_normal(2);
        let samples = mix.sample(5, 100_000).unwrap();
        let n = samples.len() as f64;
        let mut mean = [0.0; 2];
        for row in samples.rows() {
            mean[0] += row[0];
            mean[1] += row[1];
        }
        mean[0] /= n;
        mean[1] /= n;
        assert!(mean[0].abs() < 0.02 && mean[1].abs() < 0.02, "mean {mean:?}");
        let mut cov = [[0.0; 2]; 2];
        for row in samples.rows() {
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] /= n - 1.0;
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i][j] - expect).abs() < 0.05, "cov {i}{j} = {}", cov[i][j]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let mix = random_mixture(21, 2, 3);
        let a = mix.sample(77, 50).unwrap();
        let b = mix.sample(77, 50).unwrap();
        assert_eq!(a.component_indices(), b.component_indices());
        for (ra, rb) in a.rows().zip(b.rows()) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = mix.sample(78, 50).unwrap();
        assert!(a.rows().zip(c.rows()).any(|(ra, rc)| ra != rc));
    }

    #[test]
    fn average_log_density_matches_negative_entropy() {
        // For K=1 the expected log density is -(D/2)(1 + ln 2 pi) - sum ln L_ii.
        let mix = MixtureParams::new(
            vec![1.0],
            vec![vec![0.4, -1.2]],
            vec![vec![0.8, 0.3, 1.4]],
        )
        .unwrap();
        let samples = mix.sample(31, 100_000).unwrap();
        let avg: f64 = samples
            .rows()
            .map(|row| mix.log_density(row).unwrap())
            .sum::<f64>()
            / samples.len() as f64;
        let expect = -(1.0 + LN_2PI) - (0.8f64.ln() + 1.4f64.ln());
        assert!((avg - expect).abs() < 0.02, "avg {avg} expect {expect}");
    }

    #[test]
    fn log_density_survives_extreme_weights() {
        let tiny = 1e-300;
        let mix = MixtureParams::new(
            vec![1.0 - tiny, tiny],
            vec![vec![0.0], vec![5.0]],
            vec![vec![1.0], vec![1.0]],
        )
        .unwrap();
        let ld = mix.log_density(&[1.0]).unwrap();
        assert!(ld.is_finite());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mix = MixtureParams::standard_normal(2);
        assert!(matches!(
            mix.log_density(&[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn orthant_cdf_single_coincident_sample() {
        for dim in 1..=3 {
            let y = vec![0.7; dim];
            let samples = SampleSet::from_rows(&[y.clone()], 0, vec![0]).unwrap();
            let v = smooth_orthant_cdf(&y, &samples, 50.0).unwrap();
            assert!((v - 0.5f64.powi(dim as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn orthant_cdf_saturates_when_samples_below() {
        let tau = 10.0;
        let y = vec![1.0, 2.0];
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![y[0] - 10.0 / tau - i as f64, y[1] - 10.0 / tau - i as f64])
            .collect();
        let samples = SampleSet::from_rows(&rows, 0, vec![0; 5]).unwrap();
        let v = smooth_orthant_cdf(&y, &samples, tau).unwrap();
        assert!(v >= 0.9999f64.powi(2));
    }

    #[test]
    fn orthant_cdf_matches_analytic_quadrant_probability() {
        // Independent standard normals: P(Y <= 0 both coords) = 0.25.
        let mix = MixtureParams::standard_normal(2);
        let samples = mix.sample(13, 10_000).unwrap();
        let v = smooth_orthant_cdf(&[0.0, 0.0], &samples, 100.0).unwrap();
        assert!((v - 0.25).abs() < 0.02, "got {v}");
    }

    #[test]
    fn orthant_cdf_monotone_in_observation() {
        let mix = random_mixture(41, 2, 2);
        let samples = mix.sample(42, 200).unwrap();
        let mut rng = seeds::rng_for(43);
        for _ in 0..50 {
            let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let base = smooth_orthant_cdf(&y, &samples, 30.0).unwrap();
            for d in 0..2 {
                let mut up = y;
                up[d] += 0.05;
                let v = smooth_orthant_cdf(&up, &samples, 30.0).unwrap();
                assert!(v >= base - 1e-12);
            }
        }
    }

    #[test]
    fn orthant_cdf_tape_matches_eval() {
        let mix = random_mixture(51, 2, 2);
        let samples = mix.sample(52, 40).unwrap();
        let y = [0.3, -0.8];
        let expect = smooth_orthant_cdf(&y, &samples, 25.0).unwrap();
        let mut tape = Tape::new();
        let yv = tape.input_block(&y);
        let rows_v: Vec<Vec<crate::autodiff::Var>> =
            samples.rows().map(|r| tape.input_block(r)).collect();
        let refs: Vec<&[crate::autodiff::Var]> = rows_v.iter().map(|r| r.as_slice()).collect();
        let out = smooth_orthant_cdf_in(&mut tape, &yv, &refs, 25.0);
        assert!((tape.value(out) - expect).abs() < 1e-12);
    }

    #[test]
    fn log_density_tape_matches_eval_and_finite_differences() {
        let mix = random_mixture(61, 2, 2);
        let y = [0.4, -0.9];
        let expect = mix.log_density(&y).unwrap();

        let mut tape = Tape::new();
        let wl: Vec<f64> = mix.weights().to_vec();
        let weights = tape.input_block(&wl);
        let log_weights: Vec<_> = weights.iter().map(|&w| tape.ln(w)).collect();
        let means: Vec<Vec<_>> = (0..2).map(|k| tape.input_block(mix.mean(k))).collect();
        let chols: Vec<Vec<_>> = (0..2).map(|k| tape.input_block(mix.chol_factor(k))).collect();
        let ym = tape.input_block(&y);
        let gm = Mixture::from_parts(2, weights.clone(), log_weights, means, chols);
        let out = log_density_in(&mut tape, &gm, &ym);
        assert!((tape.value(out) - expect).abs() < 1e-12);

        // Finite differences through the observation.
        let g = tape.backward(out);
        let h = 1e-6;
        for d in 0..2 {
            let mut yp = y;
            yp[d] += h;
            let mut ym2 = y;
            ym2[d] -= h;
            let fd =
                (mix.log_density(&yp).unwrap() - mix.log_density(&ym2).unwrap()) / (2.0 * h);
            let ad = g[ym[d]];
            assert!((ad - fd).abs() < 1e-5 * (1.0 + fd.abs()), "d={d} ad={ad} fd={fd}");
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let (vals, vecs) = symmetric_eigen(vec![2.0, 1.0, 1.0, 2.0], 2);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((sorted[0] - 3.0).abs() < 1e-12);
        assert!((sorted[1] - 1.0).abs() < 1e-12);
        // Orthonormal and satisfies A v = lambda v.
        for (i, v) in vecs.iter().enumerate() {
            let norm: f64 = v.iter().map(|x| x * x).sum();
            assert!((norm - 1.0).abs() < 1e-12);
            let av = [2.0 * v[0] + v[1], v[0] + 2.0 * v[1]];
            for d in 0..2 {
                assert!((av[d] - vals[i] * v[d]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pca_rank_one_cloud() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 - 10.0, 0.0]).collect();
        let samples = SampleSet::from_rows(&rows, 0, vec![0; 20]).unwrap();
        let basis = pca_of_samples(&samples).unwrap();
        assert!((basis.component(1)[0] - 1.0).abs() < 1e-12);
        assert!(basis.component(1)[1].abs() < 1e-12);
        assert!(basis.eigenvalues()[1].abs() < 1e-12);
    }

    #[test]
    fn pca_isotropic_cloud_spreads_variance() {
        let mix = MixtureParams::standard_normal(3);
        let samples = mix.sample(71, 100_000).unwrap();
        let basis = pca_of_samples(&samples).unwrap();
        for r in basis.explained_variance_ratio() {
            assert!((r - 1.0 / 3.0).abs() < 0.02, "ratio {r}");
        }
    }

    #[test]
    fn pca_equivariant_under_rotation() {
        let mix = random_mixture(81, 1, 2);
        let samples = mix.sample(82, 2_000).unwrap();
        let basis = pca_of_samples(&samples).unwrap();
        let angle: f64 = 0.7;
        let (c, s) = (angle.cos(), angle.sin());
        let rotated: Vec<Vec<f64>> = samples
            .rows()
            .map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]])
            .collect();
        let rot_samples = SampleSet::from_rows(&rotated, 0, vec![0; rotated.len()]).unwrap();
        let rot_basis = pca_of_samples(&rot_samples).unwrap();
        for (a, b) in basis.eigenvalues().iter().zip(rot_basis.eigenvalues()) {
            assert!((a - b).abs() < 1e-9, "eigenvalues moved: {a} vs {b}");
        }
        for d in 1..=2 {
            let v = basis.component(d);
            let expect = [c * v[0] - s * v[1], s * v[0] + c * v[1]];
            let got = rot_basis.component(d);
            // Up to the fixed sign convention.
            let sign = if (got[0] - expect[0]).abs() < (got[0] + expect[0]).abs() {
                1.0
            } else {
                -1.0
            };
            for i in 0..2 {
                assert!((got[i] - sign * expect[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pca_requires_two_samples() {
        let samples = SampleSet::from_rows(&[vec![1.0, 2.0]], 0, vec![0]).unwrap();
        assert!(matches!(
            pca_of_samples(&samples),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn affine_standardization_preserves_law() {
        // Standardizing the mixture then evaluating at standardized y
        // must match the original density times the Jacobian.
        let mix = random_mixture(91, 2, 2);
        let shift = [0.7, -0.3];
        let scale = [2.0, 0.5];
        let std = mix.coordinatewise_affine(&shift, &scale).unwrap();
        let y = [1.1, 0.2];
        let y_std: Vec<f64> = (0..2).map(|i| (y[i] - shift[i]) / scale[i]).collect();
        let lhs = std.log_density(&y_std).unwrap();
        let rhs = mix.log_density(&y).unwrap() + scale.iter().map(|s| s.ln()).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
