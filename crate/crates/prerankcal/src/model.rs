//! The mixture-density hypernetwork.
//!
//! A fully connected ReLU network maps an input `x` to the raw head
//! `[logits | means | Cholesky entries]`, which is then constrained
//! into valid mixture parameters: softmax weights, unconstrained means,
//! and lower-triangular factors whose diagonals pass through
//! `softplus + eps_chol`. Every output therefore satisfies the mixture
//! invariants by construction.
//!
//! The forward pass is generic over the compute [`Engine`]: evaluation
//! runs on plain floats, training replays the same code onto the
//! autodiff tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_inv_f64, Engine, Eval};
use crate::distributions::{tri_len, Mixture, MixtureParams, MixturePredictor};
use crate::error::{Error, Result};
use crate::seeds;

/// Architecture and output-head constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Mixture components `K`.
    pub components: usize,
    /// Hidden layer widths; must be nonempty.
    pub hidden: Vec<usize>,
    /// Rectifier activation; echoed in checkpoints.
    pub activation: String,
    /// Floor added to softplus-constrained Cholesky diagonals.
    pub eps_chol: f64,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, output_dim: usize, components: usize) -> Self {
        NetworkConfig {
            input_dim,
            output_dim,
            components,
            hidden: vec![100, 100, 100],
            activation: "relu".to_string(),
            eps_chol: 1e-4,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("input and output dimensions must be positive"));
        }
        if self.components == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be nonempty and positive"));
        }
        if self.activation != "relu" {
            return Err(Error::invalid(format!(
                "unsupported activation `{}`",
                self.activation
            )));
        }
        if !(self.eps_chol > 0.0) {
            return Err(Error::invalid("eps_chol must be positive"));
        }
        Ok(())
    }

    /// Raw head width: `K (1 + D + D(D+1)/2)`.
    pub fn head_size(&self) -> usize {
        self.components * (1 + self.output_dim + tri_len(self.output_dim))
    }

    /// Layer dimensions from input to raw head.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.head_size());
        dims
    }

    /// Total number of parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Flat parameter vector; layer `l` occupies `[W (out x in, row-major) | b]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelWeights {
    pub params: Vec<f64>,
    pub init_seed: u64,
}

/// Fan-in-scaled uniform initialization: weights `U(-s, s)` with
/// `s = sqrt(1 / fan_in)`, biases zero. Deterministic given seed.
pub fn init_weights(config: &NetworkConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = seeds::rng_for(seed);
    let mut params = Vec::with_capacity(config.param_count());
    for w in config.layer_dims().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let s = (1.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(rand::Rng::random_range(&mut rng, -s..s));
        }
        params.extend(std::iter::repeat(0.0).take(fan_out));
    }
    Ok(ModelWeights {
        params,
        init_seed: seed,
    })
}

/// Forward pass producing constrained mixture parameters. Generic over
/// the engine; `theta` must hold `config.param_count()` values laid out
/// as in [`ModelWeights`].
pub fn forward_in<E: Engine>(
    e: &mut E,
    config: &NetworkConfig,
    theta: &[E::Value],
    x: &[E::Value],
) -> Mixture<E::Value> {
    debug_assert_eq!(theta.len(), config.param_count());
    debug_assert_eq!(x.len(), config.input_dim);
    let dims = config.layer_dims();
    let n_layers = dims.len() - 1;
    let mut activ: Vec<E::Value> = x.to_vec();
    let mut offset = 0usize;
    for layer in 0..n_layers {
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let mut next = Vec::with_capacity(fan_out);
        let bias_base = offset + fan_in * fan_out;
        for o in 0..fan_out {
            let row = &theta[offset + o * fan_in..offset + (o + 1) * fan_in];
            let lin = e.dot(row, &activ);
            let pre = e.add(lin, theta[bias_base + o]);
            next.push(if layer + 1 < n_layers { e.relu(pre) } else { pre });
        }
        activ = next;
        offset = bias_base + fan_out;
    }

    let (k, d) = (config.components, config.output_dim);
    let tl = tri_len(d);
    let logits = &activ[..k];
    let lse = e.logsumexp(logits);
    let log_weights: Vec<E::Value> = logits.iter().map(|&l| e.sub(l, lse)).collect();
    let weights: Vec<E::Value> = log_weights.iter().map(|&lw| e.exp(lw)).collect();
    let means: Vec<Vec<E::Value>> = (0..k)
        .map(|c| activ[k + c * d..k + (c + 1) * d].to_vec())
        .collect();
    let chol_base = k + k * d;
    let chols: Vec<Vec<E::Value>> = (0..k)
        .map(|c| {
            let raw = &activ[chol_base + c * tl..chol_base + (c + 1) * tl];
            let mut packed = Vec::with_capacity(tl);
            for i in 0..d {
                for j in 0..=i {
                    let entry = raw[crate::distributions::tri_idx(i, j)];
                    if i == j {
                        let sp = e.softplus(entry);
                        packed.push(e.shift(sp, config.eps_chol));
                    } else {
                        packed.push(entry);
                    }
                }
            }
            packed
        })
        .collect();
    Mixture::from_parts(d, weights, log_weights, means, chols)
}

/// A config paired with weights: the deployable predictor.
#[derive(Clone, Debug)]
pub struct MixtureNetwork {
    pub config: NetworkConfig,
    pub weights: ModelWeights,
}

impl MixtureNetwork {
    pub fn new(config: NetworkConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        if weights.params.len() != config.param_count() {
            return Err(Error::DimensionMismatch {
                expected: config.param_count(),
                got: weights.params.len(),
            });
        }
        Ok(MixtureNetwork { config, weights })
    }

    /// Forward pass on plain floats.
    pub fn forward(&self, x: &[f64]) -> Result<MixtureParams> {
        if x.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("network input must be finite"));
        }
        Ok(forward_in(&mut Eval, &self.config, &self.weights.params, x))
    }
}

impl MixturePredictor for MixtureNetwork {
    fn predict(&self, x: &[f64]) -> MixtureParams {
        self.forward(x).expect("valid input row")
    }
}

/// Versioned checkpoint container.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub seed: u64,
    pub weights: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint as JSON. Finite `f64` values survive the JSON
/// round trip bit-exactly (shortest-representation printing).
pub fn save_checkpoint(path: &std::path::Path, network: &MixtureNetwork) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: network.config.clone(),
        seed: network.weights.init_seed,
        weights: network.weights.params.clone(),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<MixtureNetwork> {
    let file = std::fs::File::open(path)?;
    let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            ckpt.format_version
        )));
    }
    MixtureNetwork::new(
        ckpt.config,
        ModelWeights {
            params: ckpt.weights,
            init_seed: ckpt.seed,
        },
    )
}

/// Raw head values that forward into the given mixture exactly
/// (inverse of the output constraints, up to a logit shift). Used by
/// tests and by oracle-checkpoint construction.
pub fn invert_head(config: &NetworkConfig, target: &MixtureParams) -> Vec<f64> {
    let (k, d) = (config.components, config.output_dim);
    let mut raw = Vec::with_capacity(config.head_size());
    for c in 0..k {
        raw.push(target.weights()[c].ln());
    }
    for c in 0..k {
        raw.extend_from_slice(target.mean(c));
    }
    for c in 0..k {
        let l = target.chol_factor(c);
        for i in 0..d {
            for j in 0..=i {
                let v = l[crate::distributions::tri_idx(i, j)];
                raw.push(if i == j {
                    softplus_inv_f64(v - config.eps_chol)
                } else {
                    v
                });
            }
        }
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_parameters_give_the_forced_output() {
        let config = NetworkConfig::new(2, 2, 3).with_hidden(vec![4]);
        let weights = ModelWeights {
            params: vec![0.0; config.param_count()],
            init_seed: 0,
        };
        let net = MixtureNetwork::new(config.clone(), weights).unwrap();
        let mix = net.forward(&[0.7, -0.2]).unwrap();
        for &w in mix.weights() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        for c in 0..3 {
            for &m in mix.mean(c) {
                assert_eq!(m, 0.0);
            }
            for i in 0..2 {
                let diag = mix.chol_entry(c, i, i);
                assert!((diag - (2f64.ln() + 1e-4)).abs() < 1e-9, "diag {diag}");
            }
            assert_eq!(mix.chol_entry(c, 1, 0), 0.0);
        }
    }

    #[test]
    fn weights_always_sum_to_one() {
        let config = NetworkConfig::new(3, 2, 4).with_hidden(vec![8, 8]);
        let mut rng = crate::seeds::rng_for(5);
        for seed in 0..20 {
            let net =
                MixtureNetwork::new(config.clone(), init_weights(&config, seed).unwrap()).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mix = net.forward(&x).unwrap();
            let total: f64 = mix.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        // Configuration chosen so biases (identically zero under the
        // init scheme) are under 1% of the vector.
        let config = NetworkConfig::new(200, 1, 1).with_hidden(vec![100]);
        let a = init_weights(&config, 7).unwrap();
        let b = init_weights(&config, 7).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let c = init_weights(&config, 8).unwrap();
        let differing = a
            .params
            .iter()
            .zip(&c.params)
            .filter(|(x, y)| x != y)
            .count();
        assert!(
            differing as f64 >= 0.99 * a.params.len() as f64,
            "{differing} of {}",
            a.params.len()
        );
    }

    #[test]
    fn fresh_init_produces_finite_nll_on_bounded_data() {
        let config = NetworkConfig::new(4, 3, 5).with_hidden(vec![16, 16]);
        let mut rng = crate::seeds::rng_for(11);
        for seed in 0..100 {
            let net =
                MixtureNetwork::new(config.clone(), init_weights(&config, seed).unwrap()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mix = net.forward(&x).unwrap();
            let nll = -mix.log_density(&y).unwrap();
            assert!(nll.is_finite(), "seed {seed}: nll = {nll}");
        }
    }

    #[test]
    fn gradient_through_log_density_matches_finite_differences() {
        use crate::autodiff::Tape;
        use crate::distributions::log_density_in;
        let config = NetworkConfig::new(2, 2, 2).with_hidden(vec![8]);
        let weights = init_weights(&config, 3).unwrap();
        let x = [0.4, -1.1];
        let y = [0.9, 0.3];

        let objective = |params: &[f64]| -> f64 {
            let mut e = Eval;
            let mix = forward_in(&mut e, &config, params, &x);
            log_density_in(&mut e, &mix, &y)
        };

        let mut tape = Tape::new();
        let theta = tape.input_block(&weights.params);
        let xv = tape.input_block(&x);
        let yv = tape.input_block(&y);
        let mix = forward_in(&mut tape, &config, &theta, &xv);
        let out = log_density_in(&mut tape, &mix, &yv);
        assert!((tape.value(out) - objective(&weights.params)).abs() < 1e-12);
        let grads = tape.backward(out).collect(&theta);

        let h = 1e-5;
        let mut p = weights.params.clone();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let fp = objective(&p);
            p[i] = orig - h;
            let fm = objective(&p);
            p[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = grads[i];
            assert!(
                (ad - fd).abs() <= 1e-4 * (1.0f64).max(ad.abs()).max(fd.abs()),
                "param {i}: ad={ad} fd={fd}"
            );
        }
    }

    #[test]
    fn constrained_head_is_surjective() {
        // Every valid mixture with diagonals above eps_chol is reachable:
        // park the hidden layer at a constant 1 and write the inverted
        // head into the output layer.
        let config = NetworkConfig::new(1, 2, 2).with_hidden(vec![1]);
        let target = MixtureParams::new(
            vec![0.3, 0.7],
            vec![vec![1.5, -0.5], vec![0.0, 2.0]],
            vec![vec![0.8, 0.25, 1.3], vec![0.5, -0.4, 0.9]],
        )
        .unwrap();
        let raw = invert_head(&config, &target);
        let mut params = vec![0.0; config.param_count()];
        // Hidden layer: weight 0, bias 1 -> activation exactly 1.
        params[1] = 1.0;
        // Output layer: W[o][0] = raw[o], bias 0.
        let out_offset = 2;
        for (o, &r) in raw.iter().enumerate() {
            params[out_offset + o] = r;
        }
        let net = MixtureNetwork::new(config, ModelWeights { params, init_seed: 0 }).unwrap();
        let mix = net.forward(&[0.0]).unwrap();
        for (a, b) in mix.weights().iter().zip(target.weights()) {
            assert!((a - b).abs() < 1e-9);
        }
        for c in 0..2 {
            for (a, b) in mix.mean(c).iter().zip(target.mean(c)) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in mix.chol_factor(c).iter().zip(target.chol_factor(c)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let config = NetworkConfig::new(3, 2, 2).with_hidden(vec![5, 4]);
        let net = MixtureNetwork::new(config, init_weights(
            &NetworkConfig::new(3, 2, 2).with_hidden(vec![5, 4]),
            99,
        ).unwrap())
        .unwrap();
        save_checkpoint(&path, &net).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, net.config);
        assert_eq!(loaded.weights.init_seed, 99);
        assert_eq!(loaded.weights.params.len(), net.weights.params.len());
        for (a, b) in loaded.weights.params.iter().zip(&net.weights.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn nonfinite_input_is_rejected() {
        let config = NetworkConfig::new(1, 1, 1).with_hidden(vec![2]);
        let net =
            MixtureNetwork::new(config.clone(), init_weights(&config, 0).unwrap()).unwrap();
        assert!(net.forward(&[f64::NAN]).is_err());
        assert!(net.forward(&[f64::INFINITY]).is_err());
    }
}
