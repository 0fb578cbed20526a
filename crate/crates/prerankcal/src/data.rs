//! Dataset handling: CSV ingestion, deterministic splitting with
//! train-fitted standardization, and synthetic generators whose exact
//! conditional laws are available for oracle checks.
//!
//! CSV contract: UTF-8, comma-separated, mandatory header, features in
//! columns named `x_*` and targets in `y_*` (configurable prefixes),
//! decimal point, scientific notation accepted. Rows containing a
//! missing, unparseable, or non-finite cell are rejected and counted;
//! a file rejecting more than half its rows is treated as malformed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{tri_idx, tri_len, MixtureParams, MixturePredictor};
use crate::error::{Error, Result};
use crate::model::{
    invert_head, MixtureNetwork, ModelWeights, NetworkConfig,
};
use crate::seeds;

/// Per-column affine transform fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_sd: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_sd: Vec<f64>,
}

/// A feature/target table. Row-major flat storage.
#[derive(Clone, Debug)]
pub struct Dataset {
    feature_names: Vec<String>,
    target_names: Vec<String>,
    features: Vec<f64>,
    targets: Vec<f64>,
    n: usize,
    /// Rows dropped during ingestion (missing or non-finite cells).
    pub rejected_rows: usize,
    /// Present after [`split`]: the stats fitted on the training split.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn from_rows(
        feature_names: Vec<String>,
        target_names: Vec<String>,
        rows: impl IntoIterator<Item = (Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let l = feature_names.len();
        let d = target_names.len();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        let mut n = 0;
        for (x, y) in rows {
            if x.len() != l {
                return Err(Error::DimensionMismatch { expected: l, got: x.len() });
            }
            if y.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: y.len() });
            }
            features.extend_from_slice(&x);
            targets.extend_from_slice(&y);
            n += 1;
        }
        Ok(Dataset {
            feature_names,
            target_names,
            features,
            targets,
            n,
            rejected_rows: 0,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn target_dim(&self) -> usize {
        self.target_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        let l = self.feature_dim();
        &self.features[i * l..(i + 1) * l]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        let d = self.target_dim();
        &self.targets[i * d..(i + 1) * d]
    }

    /// Row views in index order, for batch APIs.
    pub fn feature_rows(&self) -> Vec<&[f64]> {
        (0..self.n).map(|i| self.feature_row(i)).collect()
    }

    pub fn target_rows(&self) -> Vec<&[f64]> {
        (0..self.n).map(|i| self.target_row(i)).collect()
    }

    fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset {
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
            features: Vec::with_capacity(indices.len() * self.feature_dim()),
            targets: Vec::with_capacity(indices.len() * self.target_dim()),
            n: indices.len(),
            rejected_rows: 0,
            standardization: None,
        };
        for &i in indices {
            out.features.extend_from_slice(self.feature_row(i));
            out.targets.extend_from_slice(self.target_row(i));
        }
        out
    }

    fn apply_standardization(&mut self, stats: &Standardization) {
        let l = self.feature_dim();
        let d = self.target_dim();
        for i in 0..self.n {
            for j in 0..l {
                let v = &mut self.features[i * l + j];
                *v = (*v - stats.feature_mean[j]) / stats.feature_sd[j];
            }
            for j in 0..d {
                let v = &mut self.targets[i * d + j];
                *v = (*v - stats.target_mean[j]) / stats.target_sd[j];
            }
        }
        self.standardization = Some(stats.clone());
    }
}

/// Split fractions, shuffle seed, and the run index that selects one of
/// the independent train/validation/test shuffles.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
    /// Which of the five independent splits to use (1-based).
    pub run_index: u32,
}

impl SplitSpec {
    pub fn new(seed: u64, run_index: u32) -> Self {
        SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed,
            run_index,
        }
    }

    fn validate(&self) -> Result<()> {
        let (a, b, c) = self.fractions;
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(Error::invalid("split fractions must all be positive"));
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        if !(1..=5).contains(&self.run_index) {
            return Err(Error::invalid("run index must be in [1, 5]"));
        }
        Ok(())
    }
}

/// Deterministic permutation split with standardization fitted on the
/// training slice and applied to all three. A zero-variance column is
/// passed through unscaled (sd treated as 1).
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = dataset.len();
    if n < 3 {
        return Err(Error::invalid("dataset too small to split"));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = seeds::rng_for(seeds::split(spec.seed, spec.run_index as u64));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let n_train = ((spec.fractions.0 * n as f64).floor() as usize).max(1);
    let n_val = ((spec.fractions.1 * n as f64).floor() as usize).max(1);
    if n_train + n_val >= n {
        return Err(Error::invalid("split leaves no test rows"));
    }
    let mut train = dataset.select(&indices[..n_train]);
    let mut val = dataset.select(&indices[n_train..n_train + n_val]);
    let mut test = dataset.select(&indices[n_train + n_val..]);

    let stats = fit_standardization(&train);
    train.apply_standardization(&stats);
    val.apply_standardization(&stats);
    test.apply_standardization(&stats);
    Ok((train, val, test))
}

fn fit_standardization(train: &Dataset) -> Standardization {
    let column_stats = |dim: usize, row: &dyn Fn(usize, usize) -> f64| {
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut sd = vec![0.0; dim];
        for j in 0..dim {
            let mut total = 0.0;
            for i in 0..train.len() {
                total += row(i, j);
            }
            mean[j] = total / n;
            let mut ss = 0.0;
            for i in 0..train.len() {
                ss += (row(i, j) - mean[j]).powi(2);
            }
            let var = ss / (n - 1.0).max(1.0);
            sd[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        (mean, sd)
    };
    let (feature_mean, feature_sd) =
        column_stats(train.feature_dim(), &|i, j| train.feature_row(i)[j]);
    let (target_mean, target_sd) =
        column_stats(train.target_dim(), &|i, j| train.target_row(i)[j]);
    Standardization {
        feature_mean,
        feature_sd,
        target_mean,
        target_sd,
    }
}

/// Loads a CSV file, selecting columns by prefix.
pub fn load_csv(
    path: &std::path::Path,
    feature_prefix: &str,
    target_prefix: &str,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut feature_cols = Vec::new();
    let mut target_cols = Vec::new();
    let mut feature_names = Vec::new();
    let mut target_names = Vec::new();
    for (i, name) in headers.iter().enumerate() {
        if name.starts_with(feature_prefix) {
            feature_cols.push(i);
            feature_names.push(name.to_string());
        } else if name.starts_with(target_prefix) {
            target_cols.push(i);
            target_names.push(name.to_string());
        }
    }
    if target_cols.is_empty() {
        return Err(Error::Format(format!(
            "no target columns matching prefix `{target_prefix}`"
        )));
    }
    if feature_cols.is_empty() {
        return Err(Error::Format(format!(
            "no feature columns matching prefix `{feature_prefix}`"
        )));
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut n = 0usize;
    let mut rejected = 0usize;
    let mut total = 0usize;
    'rows: for record in reader.records() {
        let record = record?;
        total += 1;
        let mut row_features = Vec::with_capacity(feature_cols.len());
        let mut row_targets = Vec::with_capacity(target_cols.len());
        for (cols, out) in [
            (&feature_cols, &mut row_features),
            (&target_cols, &mut row_targets),
        ] {
            for &c in cols.iter() {
                let cell = match record.get(c) {
                    Some(s) if !s.trim().is_empty() => s.trim(),
                    _ => {
                        rejected += 1;
                        continue 'rows;
                    }
                };
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => out.push(v),
                    _ => {
                        rejected += 1;
                        continue 'rows;
                    }
                }
            }
        }
        features.extend_from_slice(&row_features);
        targets.extend_from_slice(&row_targets);
        n += 1;
    }
    if total > 0 && rejected * 2 > total {
        return Err(Error::Format(format!(
            "rejected {rejected} of {total} rows; refusing to proceed"
        )));
    }
    Ok(Dataset {
        feature_names,
        target_names,
        features,
        targets,
        n,
        rejected_rows: rejected,
        standardization: None,
    })
}

/// Writes a dataset back to CSV with full-precision floats.
pub fn write_csv(path: &std::path::Path, dataset: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let header: Vec<&str> = dataset
        .feature_names
        .iter()
        .chain(dataset.target_names.iter())
        .map(|s| s.as_str())
        .collect();
    writer.write_record(&header)?;
    for i in 0..dataset.len() {
        let row: Vec<String> = dataset
            .feature_row(i)
            .iter()
            .chain(dataset.target_row(i))
            .map(|v| format!("{v}"))
            .collect();
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// The synthetic families. Each has a closed-form conditional law
/// exposed through [`SynthGenerator::true_mixture`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// `y = A x + eps`, `eps ~ N(0, diag(1.0, 0.25))`, `x ~ N(0, I_2)`.
    LinearGaussian,
    /// Two well-separated Gaussian components whose weight follows
    /// `sigmoid(2.5 x)`; defeats single-component models near `x = 0`.
    Bimodal,
    /// Gaussian with input-dependent spreads and correlation; exercises
    /// dependency and copula pre-ranks.
    HeteroCorr,
    /// `D = 8` with a 3-factor covariance holding about 80% of the
    /// variance, for PCA dimensionality-reduction checks.
    LowRank8,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_gaussian" => Ok(SynthKind::LinearGaussian),
            "bimodal" => Ok(SynthKind::Bimodal),
            "hetero_corr" => Ok(SynthKind::HeteroCorr),
            "lowrank8" => Ok(SynthKind::LowRank8),
            other => Err(Error::invalid(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

/// Fixed constants of the linear-Gaussian family. The output dimension
/// is 3 because the dependency pre-rank is a constant for `D = 2` (the
/// normalized variogram of any 2-vector is -2) and only becomes
/// informative from three dimensions up. The diagonal noise covariance
/// keeps the marginal PITs of a calibrated model independent across
/// coordinates.
pub mod linear_gaussian {
    pub const INPUT_DIM: usize = 2;
    pub const OUTPUT_DIM: usize = 3;
    pub const A: [[f64; 2]; 3] = [[0.9, -0.4], [0.5, 0.8], [-0.3, 0.6]];
    /// Cholesky factor of the noise covariance diag(1.0, 0.25, 0.49).
    pub const NOISE_CHOL: [f64; 6] = [1.0, 0.0, 0.5, 0.0, 0.0, 0.7];
}

/// Orthonormal factor directions of the D = 8 family, each loading one
/// coordinate pair (entries are the unnormalized pattern; scaled by
/// 1/sqrt(2) in use).
pub const LOWRANK8_DIRECTIONS: [[f64; 8]; 3] = [
    [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
];
/// Two-point factor amplitudes: factor j takes values +-scale_j with
/// equal probability, so its variance is scale_j^2 and the top three
/// covariance eigenvalues carry about 80% of the total variance.
pub const LOWRANK8_SCALES: [f64; 3] = [2.0, 1.6, 1.2];
pub const LOWRANK8_NOISE_VAR: f64 = 0.45;

/// A synthetic data generator with a known conditional distribution.
#[derive(Clone, Debug)]
pub struct SynthGenerator {
    pub kind: SynthKind,
}

impl SynthGenerator {
    pub fn new(kind: SynthKind) -> Self {
        SynthGenerator { kind }
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            SynthKind::LinearGaussian => linear_gaussian::INPUT_DIM,
            SynthKind::LowRank8 => 2,
            SynthKind::Bimodal | SynthKind::HeteroCorr => 1,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            SynthKind::LinearGaussian => linear_gaussian::OUTPUT_DIM,
            SynthKind::LowRank8 => 8,
            SynthKind::Bimodal | SynthKind::HeteroCorr => 2,
        }
    }

    fn sample_x(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.kind {
            SynthKind::LinearGaussian | SynthKind::LowRank8 => {
                (0..2).map(|_| StandardNormal.sample(rng)).collect()
            }
            SynthKind::Bimodal | SynthKind::HeteroCorr => {
                vec![rng.random_range(-2.0..2.0)]
            }
        }
    }

    /// The exact conditional distribution of `y` given `x`, as a
    /// mixture in original (unstandardized) units.
    pub fn true_mixture(&self, x: &[f64]) -> MixtureParams {
        match self.kind {
            SynthKind::LinearGaussian => {
                let a = linear_gaussian::A;
                let mean = (0..linear_gaussian::OUTPUT_DIM)
                    .map(|i| a[i][0] * x[0] + a[i][1] * x[1])
                    .collect();
                MixtureParams::new(
                    vec![1.0],
                    vec![mean],
                    vec![linear_gaussian::NOISE_CHOL.to_vec()],
                )
                .expect("valid oracle mixture")
            }
            SynthKind::Bimodal => {
                // Spike and slab: a tight mode plus a broad one, with
                // an input-dependent weight. The law is sharply
                // non-Gaussian at every input, so a single-component
                // fit matches the moments but stays visibly
                // miscalibrated in its projected PITs.
                let w = crate::autodiff::sigmoid_f64(0.8 * x[0]);
                let mu_a = vec![1.6 + 0.3 * x[0], 1.6];
                let mu_b = vec![-1.0, -1.0 + 0.3 * x[0]];
                let chol_a = vec![0.15, 0.0, 0.15];
                let chol_b = vec![1.0, 0.0, 1.0];
                MixtureParams::new(vec![w, 1.0 - w], vec![mu_a, mu_b], vec![chol_a, chol_b])
                    .expect("valid oracle mixture")
            }
            SynthKind::HeteroCorr => {
                // Two overlapping components with opposite correlation
                // signs and an input-dependent weight. The conditional
                // correlation sweeps with x, while the X-shaped joint
                // law and the skewed marginals stay outside the single-
                // Gaussian class at every input.
                let t = x[0];
                let w = crate::autodiff::sigmoid_f64(t);
                let mu_a = vec![1.2 + 0.2 * t, 1.2];
                let mu_b = vec![-1.2, -1.2 + 0.2 * t];
                // sd (0.5, 0.5), corr +0.85 and sd (0.9, 0.9), corr -0.85.
                let chol_a = vec![0.5, 0.425, 0.26339134382131846];
                let chol_b = vec![0.9, -0.765, 0.47410441887837325];
                MixtureParams::new(vec![w, 1.0 - w], vec![mu_a, mu_b], vec![chol_a, chol_b])
                    .expect("valid oracle mixture")
            }
            SynthKind::LowRank8 => {
                // y = M x + sum_j f_j u_j + eps with two-point factors
                // f_j = +-scale_j: an exact 8-component mixture over
                // the sign choices, isotropic Gaussian noise.
                let d = 8;
                let base: Vec<f64> = (0..d)
                    .map(|i| {
                        let phase = 0.7 * (i + 1) as f64;
                        0.3 * (phase.cos() * x[0] + phase.sin() * x[1])
                    })
                    .collect();
                let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
                let mut means = Vec::with_capacity(8);
                for signs in 0..8u32 {
                    let mut mean = base.clone();
                    for (f, dir) in LOWRANK8_DIRECTIONS.iter().enumerate() {
                        let sign = if signs >> f & 1 == 1 { 1.0 } else { -1.0 };
                        for i in 0..d {
                            mean[i] += sign * LOWRANK8_SCALES[f] * dir[i] * inv_sqrt2;
                        }
                    }
                    means.push(mean);
                }
                let sd = LOWRANK8_NOISE_VAR.sqrt();
                let mut chol = vec![0.0; tri_len(d)];
                for i in 0..d {
                    chol[tri_idx(i, i)] = sd;
                }
                MixtureParams::new(vec![0.125; 8], means, vec![chol; 8])
                    .expect("valid oracle mixture")
            }
        }
    }

    /// Generates a dataset of `n` rows. Deterministic given seed; rows
    /// are seeded independently by index.
    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let l = self.input_dim();
        let d = self.output_dim();
        let feature_names = (0..l).map(|i| format!("x_{i}")).collect();
        let target_names = (0..d).map(|i| format!("y_{i}")).collect();
        let mut dataset = Dataset {
            feature_names,
            target_names,
            features: Vec::with_capacity(n * l),
            targets: Vec::with_capacity(n * d),
            n,
            rejected_rows: 0,
            standardization: None,
        };
        for i in 0..n {
            let mut rng = seeds::rng_for(seeds::split2(seed, i as u64, 0));
            let x = self.sample_x(&mut rng);
            let mix = self.true_mixture(&x);
            let y = mix
                .sample(seeds::split2(seed, i as u64, 1), 1)
                .expect("count >= 1");
            dataset.features.extend_from_slice(&x);
            dataset.targets.extend_from_slice(y.row(0));
        }
        dataset
    }
}

/// Convenience wrapper: `synth(kind, n, seed)`.
pub fn synth(kind: SynthKind, n: usize, seed: u64) -> Dataset {
    SynthGenerator::new(kind).generate(n, seed)
}

/// The true generator expressed in the standardized units of a split:
/// un-standardizes the features, queries the oracle, and standardizes
/// the resulting mixture.
pub struct StandardizedOracle<'a> {
    pub generator: &'a SynthGenerator,
    pub stats: &'a Standardization,
}

impl MixturePredictor for StandardizedOracle<'_> {
    fn predict(&self, x_std: &[f64]) -> MixtureParams {
        let x: Vec<f64> = x_std
            .iter()
            .zip(self.stats.feature_mean.iter().zip(&self.stats.feature_sd))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect();
        self.generator
            .true_mixture(&x)
            .coordinatewise_affine(&self.stats.target_mean, &self.stats.target_sd)
            .expect("oracle mixture standardizes")
    }
}

/// Builds a network that reproduces the linear-Gaussian oracle exactly
/// in standardized units, via paired ReLU units computing the identity.
/// Useful for exercising evaluation paths with a perfectly calibrated
/// checkpoint.
pub fn linear_gaussian_oracle_network(stats: &Standardization) -> Result<MixtureNetwork> {
    let l = linear_gaussian::INPUT_DIM;
    let d = linear_gaussian::OUTPUT_DIM;
    let config = NetworkConfig::new(l, d, 1).with_hidden(vec![2 * l]);

    // Standardized conditional: mean' = A' x_std + b', chol' = S_y^-1 L.
    let a = linear_gaussian::A;
    let mut a_std = vec![vec![0.0; l]; d];
    let mut b_std = vec![0.0; d];
    for i in 0..d {
        let sy = stats.target_sd[i];
        for j in 0..l {
            a_std[i][j] = a[i][j] * stats.feature_sd[j] / sy;
        }
        let ax_mean: f64 = (0..l).map(|j| a[i][j] * stats.feature_mean[j]).sum();
        b_std[i] = (ax_mean - stats.target_mean[i]) / sy;
    }
    let mut chol_std = vec![0.0; tri_len(d)];
    for i in 0..d {
        for j in 0..=i {
            chol_std[tri_idx(i, j)] = linear_gaussian::NOISE_CHOL[tri_idx(i, j)] / stats.target_sd[i];
        }
    }
    let template = MixtureParams::new(vec![1.0], vec![b_std], vec![chol_std])?;
    let raw_head = invert_head(&config, &template);

    let mut params = vec![0.0; config.param_count()];
    // Hidden layer: h = relu([I; -I] x), so h[j] - h[j + L] = x[j].
    for j in 0..l {
        params[j * l + j] = 1.0;
        params[(l + j) * l + j] = -1.0;
    }
    let hidden_end = 2 * l * l + 2 * l; // weights + zero biases
    // Output layer: bias carries the inverted head; the mean rows also
    // read the identity pair to add A' x.
    let head = config.head_size();
    let w_out = &mut params[hidden_end..hidden_end + head * 2 * l];
    for i in 0..d {
        let row = 1 + i; // logits first, then means
        for j in 0..l {
            w_out[row * 2 * l + j] = a_std[i][j];
            w_out[row * 2 * l + l + j] = -a_std[i][j];
        }
    }
    let b_out = hidden_end + head * 2 * l;
    for (o, &r) in raw_head.iter().enumerate() {
        params[b_out + o] = r;
    }
    MixtureNetwork::new(config, ModelWeights { params, init_seed: 0 })
}
