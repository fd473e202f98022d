//! Fully connected tanh network with a scalar linear output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{xavier, Network, OptimizerConfig};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    /// Hidden layer widths; empty gives a linear model.
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            learning_rate: 1e-3,
            batch_size: 128,
        }
    }
}

impl MlpParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(crate::LabError::Config("mlp: hidden widths must be positive".into()));
        }
        self.optimizer().validate("mlp")
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

/// Layer `l` stores an `out x in` row-major weight block followed by `out`
/// biases; blocks are concatenated in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl MlpNet {
    pub fn n_params(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|s| s[1] * s[0] + s[1]).sum()
    }

    pub fn new(n_inputs: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![n_inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = Vec::with_capacity(Self::n_params(&sizes));
        for s in sizes.windows(2) {
            let bound = xavier(s[0], s[1]);
            params.extend((0..s[0] * s[1]).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, s[1]));
        }
        Self { sizes, params }
    }

    pub fn builder(p: &MlpParams) -> impl Fn(usize, &mut ChaCha8Rng) -> MlpNet + '_ {
        move |n, rng| MlpNet::new(n, &p.hidden, rng)
    }

    /// Random net with random biases, for gradient checks.
    pub fn random(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..Self::n_params(sizes)).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self {
            sizes: sizes.to_vec(),
            params,
        }
    }

    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.sizes.len() - 2;
        for (l, s) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (s[0], s[1]);
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let a = acts.last().unwrap();
            let z: Vec<f64> = (0..n_out)
                .map(|k| {
                    let wk = &w[k * n_in..(k + 1) * n_in];
                    b[k] + wk.iter().zip(a).map(|(p, q)| p * q).sum::<f64>()
                })
                .collect();
            acts.push(if l == last { z } else { z.into_iter().map(f64::tanh).collect() });
            off += n_in * n_out + n_out;
        }
        acts
    }
}

impl Network for MlpNet {
    const NAME: &'static str = "mlp";

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> f64 {
        self.activations(x).last().unwrap()[0]
    }

    fn backward(&self, x: &[f64], upstream: &mut dyn FnMut(f64) -> f64, grad: &mut [f64]) -> f64 {
        let acts = self.activations(x);
        let out = acts.last().unwrap()[0];
        let mut delta = vec![upstream(out)];
        let mut offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |off, s| {
                let o = *off;
                *off += s[0] * s[1] + s[1];
                Some(o)
            })
            .collect();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets.pop().unwrap();
            let a = &acts[l];
            for k in 0..n_out {
                let gk = &mut grad[off + k * n_in..off + (k + 1) * n_in];
                for (g, ai) in gk.iter_mut().zip(a) {
                    *g += delta[k] * ai;
                }
                grad[off + n_in * n_out + k] += delta[k];
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|k| w[k * n_in + i] * delta[k]).sum();
                        back * (1.0 - a[i] * a[i])
                    })
                    .collect();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::models::nn::gradient_check;
    use crate::models::Task;

    fn inputs(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, task) in [(1, Task::Regression), (2, Task::BinaryClassification)] {
            let net = MlpNet::random(&[4, 5, 3, 1], seed);
            let x = inputs(6, 4, seed);
            let y: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
            let w: Vec<f64> = (0..6).map(|i| 1.0 + i as f64).collect();
            assert!(gradient_check(&net, &x, &y, &w, task, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn linear_net_has_expected_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpNet::new(7, &[], &mut rng);
        assert_eq!(net.params.len(), 8);
        assert_eq!(net.forward(&[0.0; 7]), 0.0);
    }
}
